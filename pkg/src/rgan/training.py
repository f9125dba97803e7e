"""Training procedures and checkpointing.

Approach 1 alternates discriminator and generator phases per step; the
discriminator sees one concatenated, shuffled real+fake batch per head
per step. Approach 2 runs an encoder (discriminator) phase that never
touches generated images, then a generator phase that may share the
encoder parameters.

Every random draw is derived from (seed, step, phase) via sha256, so a
resumed run replays the interrupted one's randomness exactly without
serializing RNG internals.
"""

from __future__ import annotations

import collections
import hashlib
import json
import math
import os
import shutil
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .losses import (
    AdversarialWeights,
    PairLabel,
    bce_discriminator_loss,
    bce_generator_loss,
    gram_similarity,
    l1_loss,
    pairwise_marginal_loss,
    style_class_nll,
)
from .models_a1 import (
    GeneratorA1Config,
    PatchDiscriminatorConfig,
    StyleDiscriminatorConfig,
    build_generator_a1,
    build_patch_discriminator,
    build_wavelet_style_discriminator,
)
from .models_a2 import A2Config, build_a2_models
from .tensorops import to_nchw

CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    """Raised when a step produces a non-finite loss."""


def derive_seed(seed: int, step: int, phase: str) -> int:
    digest = hashlib.sha256(f"{seed}:{step}:{phase}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


# ---- configuration ----


@dataclass(frozen=True)
class TrainConfig:
    approach: str = "a2"
    weights: AdversarialWeights = field(default_factory=AdversarialWeights)
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 4
    steps: int = 100
    seed: int = 0
    margins: tuple[float, float] = (0.0, 1.0)
    gamma: float | None = None  # None -> sqrt(embedding dim) at the call site
    encoder_update_in_gen_step: bool = True
    checkpoint_every: int = 50
    grad_clip: float | None = None
    history_size: int = 100
    a1_generator: GeneratorA1Config = field(default_factory=GeneratorA1Config)
    a1_patch: PatchDiscriminatorConfig = field(default_factory=PatchDiscriminatorConfig)
    a1_style: StyleDiscriminatorConfig = field(default_factory=StyleDiscriminatorConfig)
    a2: A2Config = field(default_factory=A2Config)

    def __post_init__(self):
        problems = []
        if self.approach not in ("a1", "a2"):
            problems.append(f"approach must be 'a1' or 'a2', got {self.approach!r}")
        for name in ("lr_generator", "lr_discriminator", "batch_size", "steps",
                     "checkpoint_every", "history_size"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        m_pos, m_neg = self.margins
        if not 0.0 <= m_pos < m_neg:
            problems.append(f"margins must satisfy m_neg > m_pos >= 0, got {self.margins}")
        if self.gamma is not None and self.gamma <= 0:
            problems.append(f"gamma must be positive, got {self.gamma}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append(f"grad_clip must be positive, got {self.grad_clip}")
        if problems:
            raise ValueError("; ".join(problems))


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(payload: dict) -> TrainConfig:
    p = dict(payload)
    p["weights"] = AdversarialWeights(**p["weights"])
    p["betas"] = tuple(p["betas"])
    p["margins"] = tuple(p["margins"])
    a1g = dict(p["a1_generator"])
    a1g["image_size"] = tuple(a1g["image_size"])
    p["a1_generator"] = GeneratorA1Config(**a1g)
    p["a1_patch"] = PatchDiscriminatorConfig(**p["a1_patch"])
    p["a1_style"] = StyleDiscriminatorConfig(**p["a1_style"])
    a2 = dict(p["a2"])
    a2["image_size"] = tuple(a2["image_size"])
    p["a2"] = A2Config(**a2)
    return TrainConfig(**p)


def config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(config_to_dict(config), sort_keys=True).encode()
    ).hexdigest()


# ---- state ----


@dataclass
class StepMetrics:
    step: int
    g_total: float = 0.0
    g_adv_style: float = 0.0
    g_adv_content: float = 0.0
    g_l1: float = 0.0
    d_content: float = 0.0
    d_style: float = 0.0
    time_ms: float = 0.0

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def loss_fields(self) -> dict:
        d = asdict(self)
        d.pop("time_ms")
        return d


@dataclass
class AuditCounters:
    """Evidence for the training contracts, gathered while running."""

    d_steps: int = 0
    g_steps: int = 0
    patch_disc_forwards_in_d_steps: int = 0
    style_disc_forwards_in_d_steps: int = 0
    decoder_forwards_in_d_steps: int = 0
    encoder_params_updated_in_d_steps: list = field(default_factory=list)
    encoder_params_read_in_g_steps: list = field(default_factory=list)
    encoder_params_updated_in_g_steps: list = field(default_factory=list)

    def to_manifest(self) -> dict:
        return {
            "d_steps": self.d_steps,
            "g_steps": self.g_steps,
            "patch_disc_forwards_in_d_steps": self.patch_disc_forwards_in_d_steps,
            "style_disc_forwards_in_d_steps": self.style_disc_forwards_in_d_steps,
            "decoder_forwards_in_d_steps": self.decoder_forwards_in_d_steps,
        }


@dataclass
class TripletCursor:
    """Position in the shuffled cell enumeration; permutations are derived
    from (seed, epoch), so (epoch, position) is the whole state."""

    n_cells: int
    seed: int
    epoch: int = 0
    position: int = 0

    def _perm(self) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(self.seed, self.epoch, "epoch"))
        return rng.permutation(self.n_cells)

    def take(self, count: int) -> list[int]:
        out = []
        perm = self._perm()
        for _ in range(count):
            if self.position >= self.n_cells:
                self.epoch += 1
                self.position = 0
                perm = self._perm()
            out.append(int(perm[self.position]))
            self.position += 1
        return out


@dataclass
class TrainState:
    config: TrainConfig
    models: dict
    optimizers: dict
    step: int = 0
    cursor: TripletCursor | None = None
    audit: AuditCounters = field(default_factory=AuditCounters)
    history: collections.deque = field(default_factory=lambda: collections.deque(maxlen=100))


def build_train_state(config: TrainConfig) -> TrainState:
    if config.approach == "a1":
        models = {
            "generator": build_generator_a1(config.a1_generator, seed=config.seed),
            "patch_disc": build_patch_discriminator(config.a1_patch, seed=config.seed + 1),
            "style_disc": build_wavelet_style_discriminator(
                config.a1_style, seed=config.seed + 2
            ),
        }
        lrs = {
            "generator": config.lr_generator,
            "patch_disc": config.lr_discriminator,
            "style_disc": config.lr_discriminator,
        }
    else:
        bundle = build_a2_models(config.a2, seed=config.seed)
        models = {
            "content_encoder": bundle.content_encoder,
            "style_encoder": bundle.style_encoder,
            "decoder": bundle.decoder,
        }
        lrs = {
            "content_encoder": config.lr_discriminator,
            "style_encoder": config.lr_discriminator,
            "decoder": config.lr_generator,
        }
    optimizers = {
        name: torch.optim.Adam(model.parameters(), lr=lrs[name], betas=config.betas)
        for name, model in models.items()
    }
    return TrainState(
        config=config,
        models=models,
        optimizers=optimizers,
        history=collections.deque(maxlen=config.history_size),
    )


def _check_finite(values: dict, step: int):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDivergence(f"non-finite loss at step {step}: {bad}")


def _optimizer_step(state: TrainState, name: str):
    if state.config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(
            state.models[name].parameters(), state.config.grad_clip
        )
    state.optimizers[name].step()


# ---- approach 1 ----


def _stack_triplets(batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    contents = to_nchw(torch.stack([torch.as_tensor(t.content) for t in batch]))
    styles = to_nchw(torch.stack([torch.as_tensor(t.style) for t in batch]))
    targets = to_nchw(torch.stack([torch.as_tensor(t.target) for t in batch]))
    return contents, styles, targets


def _split_joint(joint: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    half = joint.shape[1] // 2
    return joint[:, :half], joint[:, half:]


def a1_generator_objective(
    state: TrainState,
    fake: torch.Tensor,
    content: torch.Tensor,
    style: torch.Tensor,
    target: torch.Tensor,
    include_style: bool = True,
    include_content: bool = True,
):
    """Weighted generator loss. Zero-weight branches are skipped rather
    than multiplied by zero, so ablating a branch and weighting it at
    zero produce bit-identical parameter updates."""
    cfg = state.config
    alpha = cfg.weights.alpha
    zero = torch.zeros(())
    style_adv = zero
    content_adv = zero
    if include_style and alpha > 0.0:
        joint = state.models["style_disc"](style, fake)
        e_style, e_cand = _split_joint(joint)
        style_adv = pairwise_marginal_loss(
            e_style, e_cand, PairLabel.POSITIVE, margins=cfg.margins
        )
    if include_content and alpha < 1.0:
        probs = state.models["patch_disc"](torch.cat([content, fake], dim=1))
        content_adv = bce_generator_loss(probs)
    g_l1 = l1_loss(fake, target)
    total = alpha * style_adv + (1.0 - alpha) * content_adv + cfg.weights.lambda_l1 * g_l1
    return total, style_adv, content_adv, g_l1


def train_step_a1(state: TrainState, triplet_batch) -> StepMetrics:
    """One alternation: discriminator phase then generator phase.

    The caller owns state.step (the loop sets it before invoking); this
    function derives all of the step's randomness from it.
    """
    if state.config.approach != "a1":
        raise ValueError(f"state approach is {state.config.approach!r}, expected 'a1'")
    cfg = state.config
    t0 = time.monotonic()
    content, style, target = _stack_triplets(triplet_batch)
    n = content.shape[0]
    for model in state.models.values():
        model.train()

    # Discriminator phase: one concatenated shuffled batch per head.
    torch.manual_seed(derive_seed(cfg.seed, state.step, "a1-d"))
    with torch.no_grad():
        fake = state.models["generator"](torch.cat([content, style], dim=1))

    shuffle_gen = torch.Generator()
    shuffle_gen.manual_seed(derive_seed(cfg.seed, state.step, "a1-shuffle"))
    perm = torch.randperm(2 * n, generator=shuffle_gen)
    labels = torch.cat([torch.ones(n), torch.zeros(n)])[perm]

    pd_before = state.models["patch_disc"].forward_calls
    sd_before = state.models["style_disc"].forward_calls

    candidates = torch.cat([target, fake], dim=0)[perm]
    conditions = torch.cat([content, content], dim=0)[perm]
    probs = state.models["patch_disc"](torch.cat([conditions, candidates], dim=1))
    d_content = bce_discriminator_loss(probs[labels == 1], probs[labels == 0])

    style_sides = torch.cat([style, style], dim=0)[perm]
    joint = state.models["style_disc"](style_sides, candidates)
    e_style, e_cand = _split_joint(joint)
    d_style = pairwise_marginal_loss(e_style, e_cand, labels, margins=cfg.margins)

    _check_finite(
        {"d_content": d_content.detach().item(), "d_style": d_style.detach().item()},
        state.step,
    )
    state.optimizers["patch_disc"].zero_grad()
    d_content.backward()
    _optimizer_step(state, "patch_disc")
    state.optimizers["style_disc"].zero_grad()
    d_style.backward()
    _optimizer_step(state, "style_disc")

    state.audit.d_steps += 1
    state.audit.patch_disc_forwards_in_d_steps += (
        state.models["patch_disc"].forward_calls - pd_before
    )
    state.audit.style_disc_forwards_in_d_steps += (
        state.models["style_disc"].forward_calls - sd_before
    )

    # Generator phase.
    torch.manual_seed(derive_seed(cfg.seed, state.step, "a1-g"))
    fake2 = state.models["generator"](torch.cat([content, style], dim=1))
    g_total, g_style, g_content, g_l1 = a1_generator_objective(
        state, fake2, content, style, target
    )
    _check_finite({"g_total": g_total.detach().item()}, state.step)
    state.optimizers["generator"].zero_grad()
    g_total.backward()
    _optimizer_step(state, "generator")
    state.audit.g_steps += 1

    return StepMetrics(
        step=state.step,
        g_total=g_total.detach().item(),
        g_adv_style=g_style.detach().item(),
        g_adv_content=g_content.detach().item(),
        g_l1=g_l1.detach().item(),
        d_content=d_content.detach().item(),
        d_style=d_style.detach().item(),
        time_ms=(time.monotonic() - t0) * 1000.0,
    )


# ---- approach 2 ----


def _hwc_batch_to_nchw(images: torch.Tensor) -> torch.Tensor:
    return to_nchw(torch.as_tensor(images))


def _encoder_param_ids(state: TrainState) -> list[int]:
    ids = []
    for name in ("content_encoder", "style_encoder"):
        for group in state.optimizers[name].param_groups:
            ids.extend(id(p) for p in group["params"])
    return sorted(ids)


def train_step_a2_discriminator(
    state: TrainState, pair_batch: data_mod.PairBatch, style_batch: data_mod.StyleBatch
) -> StepMetrics:
    """Encoder (discriminator) phase: metric losses on real images only.

    The decoder is never invoked; the audit counters prove it.
    """
    if state.config.approach != "a2":
        raise ValueError(f"state approach is {state.config.approach!r}, expected 'a2'")
    cfg = state.config
    t0 = time.monotonic()
    torch.manual_seed(derive_seed(cfg.seed, state.step, "a2-d"))
    content_enc = state.models["content_encoder"]
    style_enc = state.models["style_encoder"]
    decoder = state.models["decoder"]
    content_enc.train()
    style_enc.train()
    dec_before = decoder.forward_calls

    # Content encoder: contrastive loss over real pairs. One forward over
    # the concatenated batch keeps batch-norm statistics shared.
    anchors = _hwc_batch_to_nchw(pair_batch.anchors)
    partners = _hwc_batch_to_nchw(pair_batch.partners)
    n = anchors.shape[0]
    latents, _ = content_enc(torch.cat([anchors, partners], dim=0))
    d_content = pairwise_marginal_loss(
        latents[:n], latents[n:], pair_batch.labels, margins=cfg.margins
    )

    # Style encoder: temperature-scaled similarity + class NLL.
    s_anchors = _hwc_batch_to_nchw(style_batch.anchors)
    s_styles = _hwc_batch_to_nchw(style_batch.styles)
    na = s_anchors.shape[0]
    embs = style_enc(torch.cat([s_anchors, s_styles], dim=0))
    h = gram_similarity(embs[:na], embs[na:], gamma=cfg.gamma)
    d_style = style_class_nll(h, style_batch.style_labels, style_batch.anchor_labels)

    _check_finite(
        {"d_content": d_content.detach().item(), "d_style": d_style.detach().item()},
        state.step,
    )
    state.optimizers["content_encoder"].zero_grad()
    d_content.backward()
    _optimizer_step(state, "content_encoder")
    state.optimizers["style_encoder"].zero_grad()
    d_style.backward()
    _optimizer_step(state, "style_encoder")

    state.audit.d_steps += 1
    state.audit.decoder_forwards_in_d_steps += decoder.forward_calls - dec_before
    state.audit.encoder_params_updated_in_d_steps = _encoder_param_ids(state)

    return StepMetrics(
        step=state.step,
        d_content=d_content.detach().item(),
        d_style=d_style.detach().item(),
        time_ms=(time.monotonic() - t0) * 1000.0,
    )


def a2_generator_objective(
    state: TrainState,
    content: torch.Tensor,
    style_imgs: torch.Tensor,
    style_labels: list[int],
    include_style: bool = True,
    include_content: bool = True,
):
    """Generator loss for a batch of (content, style) inputs.

    Style branch: the generated image's style embedding must classify as
    its input style's class against the batch of real style embeddings.
    Content branch: the generated image's content latent must stay close
    (positive pair) to the content image's latent. L1 anchors colors to
    the content image. Zero-weight branches are skipped, exactly as in
    the A1 objective.
    """
    cfg = state.config
    alpha = cfg.weights.alpha
    content_enc = state.models["content_encoder"]
    style_enc = state.models["style_encoder"]
    decoder = state.models["decoder"]

    style_latents = style_enc(style_imgs)
    _, skips = content_enc(content)
    fake = decoder(style_latents, skips)

    zero = torch.zeros(())
    style_term = zero
    content_term = zero
    if include_style and alpha > 0.0:
        fake_emb = style_enc(fake)
        h = gram_similarity(fake_emb, style_latents, gamma=cfg.gamma)
        style_term = style_class_nll(h, style_labels, style_labels)
    if include_content and alpha < 1.0:
        fake_latent, _ = content_enc(fake)
        real_latent, _ = content_enc(content)
        content_term = pairwise_marginal_loss(
            fake_latent, real_latent, PairLabel.POSITIVE, margins=cfg.margins
        )
    g_l1 = l1_loss(fake, content)
    total = (
        alpha * style_term
        + (1.0 - alpha) * content_term
        + cfg.weights.lambda_l1 * g_l1
    )
    return total, style_term, content_term, g_l1


def train_step_a2_generator(
    state: TrainState, content_batch: torch.Tensor, style_batch: data_mod.StyleBatch
) -> StepMetrics:
    """Generator phase: decoder always updates; encoders update too when
    config.encoder_update_in_gen_step (the shared-parameter-space mode)."""
    if state.config.approach != "a2":
        raise ValueError(f"state approach is {state.config.approach!r}, expected 'a2'")
    cfg = state.config
    t0 = time.monotonic()
    torch.manual_seed(derive_seed(cfg.seed, state.step, "a2-g"))
    state.models["decoder"].train()
    # Frozen encoders must come out of the step bit-identical, running
    # statistics included, so they run in eval mode when not updating.
    for name in ("content_encoder", "style_encoder"):
        state.models[name].train(cfg.encoder_update_in_gen_step)

    content = _hwc_batch_to_nchw(content_batch)
    n = content.shape[0]
    styles_hwc = torch.as_tensor(style_batch.styles)
    pick = [i % styles_hwc.shape[0] for i in range(n)]
    style_imgs = _hwc_batch_to_nchw(styles_hwc[pick])
    input_labels = [style_batch.style_labels[i] for i in pick]

    g_total, g_style, g_content, g_l1 = a2_generator_objective(
        state, content, style_imgs, input_labels
    )
    _check_finite({"g_total": g_total.detach().item()}, state.step)

    for name in state.optimizers:
        state.optimizers[name].zero_grad()
    g_total.backward()
    _optimizer_step(state, "decoder")
    if cfg.encoder_update_in_gen_step:
        _optimizer_step(state, "content_encoder")
        _optimizer_step(state, "style_encoder")
        state.audit.encoder_params_updated_in_g_steps = _encoder_param_ids(state)
    state.audit.g_steps += 1
    state.audit.encoder_params_read_in_g_steps = sorted(
        [id(p) for p in state.models["content_encoder"].parameters()]
        + [id(p) for p in state.models["style_encoder"].parameters()]
    )

    return StepMetrics(
        step=state.step,
        g_total=g_total.detach().item(),
        g_adv_style=g_style.detach().item(),
        g_adv_content=g_content.detach().item(),
        g_l1=g_l1.detach().item(),
        time_ms=(time.monotonic() - t0) * 1000.0,
    )


# ---- the loop ----


@dataclass
class DataHandles:
    """Corpora for one run: A1 needs the matrix; A2 needs contents plus a
    labeled style corpus."""

    matrix: data_mod.ImageMatrix | None = None
    contents: list | None = None
    style_corpus: data_mod.StyleCorpus | None = None


def _validate_handles(config: TrainConfig, handles: DataHandles):
    if config.approach == "a1":
        if handles.matrix is None:
            raise ValueError("approach a1 requires an image matrix")
    else:
        if not handles.contents or handles.style_corpus is None:
            raise ValueError("approach a2 requires content images and a style corpus")
        if len(set(handles.style_corpus.labels)) < 2:
            raise ValueError("style corpus needs >= 2 classes for metric learning")


def _a1_batch(state: TrainState, matrix: data_mod.ImageMatrix):
    indices = state.cursor.take(state.config.batch_size)
    batch = []
    for k in indices:
        i, j = divmod(k, matrix.m)
        batch.append(
            data_mod.TripletSample(
                content=matrix.contents[i],
                style=matrix.styles[j],
                target=matrix.cells[i][j],
                content_index=i,
                style_index=j,
            )
        )
    return batch


def train_loop(
    config: TrainConfig,
    handles: DataHandles,
    out_dir=None,
    resume_from=None,
) -> tuple[TrainState, list[StepMetrics]]:
    """Run the approach's step schedule for config.steps steps.

    Checkpoints land in out_dir/checkpoint_step_{n} every checkpoint_every
    steps (and at the final step); metrics append to out_dir/metrics.jsonl,
    one JSON object per step. On a non-finite loss the run aborts with the
    last checkpoint retained.
    """
    _validate_handles(config, handles)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if config_hash(state.config) != config_hash(config):
            raise ValueError(
                "checkpoint config does not match the requested config; "
                "refusing to resume"
            )
    else:
        state = build_train_state(config)
        if config.approach == "a1":
            state.cursor = TripletCursor(
                n_cells=handles.matrix.n * handles.matrix.m, seed=config.seed
            )

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if state.step == 0 and metrics_path.exists():
            metrics_path.unlink()

    collected: list[StepMetrics] = []
    for step in range(state.step + 1, config.steps + 1):
        state.step = step
        if config.approach == "a1":
            metrics = train_step_a1(state, _a1_batch(state, handles.matrix))
        else:
            rng = np.random.default_rng(derive_seed(config.seed, step, "data"))
            pair_batch = data_mod.sample_content_pairs(
                handles.contents, config.batch_size, rng
            )
            style_batch = data_mod.sample_style_batch(
                handles.style_corpus, config.batch_size, config.batch_size, rng
            )
            d_metrics = train_step_a2_discriminator(state, pair_batch, style_batch)
            picks = rng.integers(0, len(handles.contents), size=config.batch_size)
            content_batch = torch.stack(
                [torch.as_tensor(handles.contents[int(i)]) for i in picks]
            )
            g_metrics = train_step_a2_generator(state, content_batch, style_batch)
            metrics = StepMetrics(
                step=step,
                g_total=g_metrics.g_total,
                g_adv_style=g_metrics.g_adv_style,
                g_adv_content=g_metrics.g_adv_content,
                g_l1=g_metrics.g_l1,
                d_content=d_metrics.d_content,
                d_style=d_metrics.d_style,
                time_ms=d_metrics.time_ms + g_metrics.time_ms,
            )
        state.history.append(metrics)
        collected.append(metrics)
        if metrics_path is not None:
            with metrics_path.open("a") as fh:
                fh.write(metrics.to_json_line() + "\n")
        if out is not None and (
            step % config.checkpoint_every == 0 or step == config.steps
        ):
            save_checkpoint(state, out / f"checkpoint_step_{step:06d}")
    return state, collected


# ---- checkpoint format ----


def _write_blob(path: Path, tensor: torch.Tensor) -> None:
    t = tensor.detach().to(torch.float32).contiguous()
    dims = list(t.shape)
    header = struct.pack("<I", len(dims)) + b"".join(struct.pack("<I", d) for d in dims)
    path.write_bytes(header + t.numpy().astype("<f4").tobytes())


def _read_blob(path: Path) -> torch.Tensor:
    raw = path.read_bytes()
    (rank,) = struct.unpack_from("<I", raw, 0)
    dims = [struct.unpack_from("<I", raw, 4 + 4 * i)[0] for i in range(rank)]
    offset = 4 + 4 * rank
    count = 1
    for d in dims:
        count *= d
    expected = offset + 4 * count
    if len(raw) != expected:
        raise ValueError(f"blob {path.name} has {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype="<f4", offset=offset, count=count).copy()
    return torch.from_numpy(arr).reshape(dims)


def _state_tensors(state: TrainState) -> dict[str, tuple[torch.Tensor, str]]:
    """Every tensor to persist: name -> (tensor, original dtype string).

    Integer buffers (batch-norm counters, optimizer step counts) are
    stored as float32; their values stay far below 2^24, so the cast is
    exact both ways.
    """
    blobs: dict[str, tuple[torch.Tensor, str]] = {}
    for model_name, model in state.models.items():
        for tensor_name, tensor in model.state_dict().items():
            key = f"{model_name}.{tensor_name}"
            blobs[key] = (tensor, str(tensor.dtype).replace("torch.", ""))
    for model_name, model in state.models.items():
        opt = state.optimizers[model_name]
        params = list(model.parameters())
        names = [n for n, _ in model.named_parameters()]
        for pname, param in zip(names, params):
            st = opt.state.get(param)
            if not st:
                continue
            for slot in ("exp_avg", "exp_avg_sq", "step"):
                value = st[slot]
                if not torch.is_tensor(value):
                    value = torch.tensor(float(value))
                key = f"opt.{model_name}.{pname}.{slot}"
                blobs[key] = (value, str(value.dtype).replace("torch.", ""))
    return blobs


def save_checkpoint(state: TrainState, path) -> dict:
    """Write the checkpoint directory atomically (temp dir + rename)."""
    target = Path(path)
    tmp = target.parent / (target.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "blobs").mkdir(parents=True)

    blobs = _state_tensors(state)
    manifest_blobs = {}
    for key, (tensor, dtype) in sorted(blobs.items()):
        fname = key.replace("/", "_") + ".bin"
        blob_path = tmp / "blobs" / fname
        _write_blob(blob_path, tensor)
        manifest_blobs[key] = {
            "file": fname,
            "dtype": dtype,
            "sha256": hashlib.sha256(blob_path.read_bytes()).hexdigest(),
        }
    manifest = {
        "version": CHECKPOINT_VERSION,
        "approach": state.config.approach,
        "config": config_to_dict(state.config),
        "config_hash": config_hash(state.config),
        "step": state.step,
        "seeds": {"seed": state.config.seed, "scheme": "sha256(seed:step:phase)"},
        "cursor": (
            {
                "n_cells": state.cursor.n_cells,
                "epoch": state.cursor.epoch,
                "position": state.cursor.position,
            }
            if state.cursor is not None
            else None
        ),
        "audit": state.audit.to_manifest(),
        "history": [asdict(m) for m in state.history],
        "blobs": manifest_blobs,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)
    return manifest


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState. All checksums are verified before any state
    is constructed, so a truncated or tampered checkpoint never yields a
    partially loaded run."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {manifest.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    for key, entry in manifest["blobs"].items():
        blob_path = root / "blobs" / entry["file"]
        if not blob_path.is_file():
            raise ValueError(f"missing blob for {key}")
        digest = hashlib.sha256(blob_path.read_bytes()).hexdigest()
        if digest != entry["sha256"]:
            raise ValueError(f"checksum mismatch for blob {key}")

    config = config_from_dict(manifest["config"])
    if config_hash(config) != manifest["config_hash"]:
        raise ValueError("manifest config hash does not match its config payload")
    state = build_train_state(config)
    state.step = manifest["step"]
    if manifest.get("cursor") is not None:
        state.cursor = TripletCursor(
            n_cells=manifest["cursor"]["n_cells"],
            seed=config.seed,
            epoch=manifest["cursor"]["epoch"],
            position=manifest["cursor"]["position"],
        )
    state.history = collections.deque(
        (StepMetrics(**m) for m in manifest["history"]), maxlen=config.history_size
    )

    tensors = {
        key: _read_blob(root / "blobs" / entry["file"]).to(
            getattr(torch, entry["dtype"])
        )
        for key, entry in manifest["blobs"].items()
    }
    for model_name, model in state.models.items():
        sd = model.state_dict()
        loaded = {}
        for tensor_name in sd:
            key = f"{model_name}.{tensor_name}"
            if key not in tensors:
                raise ValueError(f"checkpoint missing tensor {key}")
            loaded[tensor_name] = tensors[key].reshape(sd[tensor_name].shape)
        model.load_state_dict(loaded)
        opt = state.optimizers[model_name]
        for pname, param in model.named_parameters():
            slots = {}
            for slot in ("exp_avg", "exp_avg_sq", "step"):
                key = f"opt.{model_name}.{pname}.{slot}"
                if key in tensors:
                    slots[slot] = (
                        tensors[key].reshape(param.shape)
                        if slot != "step"
                        else tensors[key].reshape(())
                    )
            if slots:
                opt.state[param] = slots
    return state
