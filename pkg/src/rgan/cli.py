"""Command-line interface: dataset synthesis, training, inference, evaluation.

Commands: synthesize, train, transfer, eval. Shared flags: --config (JSON
file whose keys mirror the training configuration), --seed, --out. Explicit
flags override config-file values, which override defaults. Validation
problems are reported all at once before any compute; on a mid-run failure
the output directory is quarantined under a .failed suffix.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .data import (
    StyleCorpus,
    list_images,
    load_and_preprocess,
    load_image_matrix,
    load_style_corpus,
    procedural_stylizer,
    save_image,
    save_image_matrix,
    save_style_corpus,
    synthesize_image_matrix,
)
from .evaluation import (
    cluster_quality,
    compare_param_counts,
    embed_corpus,
    export_eval_grid,
    export_pca_scatter,
)
from .models_a1 import (
    build_generator_a1,
    build_patch_discriminator,
    build_wavelet_style_discriminator,
)
from .models_a2 import A2Models, build_a2_models, generator_a2_forward
from .models_a1 import generator_a1_forward
from .training import (
    DataHandles,
    TrainConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_checkpoint,
    train_loop,
)


class ValidationError(Exception):
    """Carries every detected input problem so all are reported together."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    started_at: str = ""
    finished_at: str = ""

    def write(self, out_dir: Path) -> Path:
        self.finished_at = _iso_now()
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _iso_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _dict_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _is_power_of_two(n: int) -> bool:
    return n >= 8 and (n & (n - 1)) == 0


def _thread_env_problem() -> str | None:
    raw = os.environ.get("RGAN_NUM_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
        if n <= 0:
            raise ValueError
    except ValueError:
        return f"RGAN_NUM_THREADS must be a positive integer, got {raw!r}"
    torch.set_num_threads(n)
    return None


def _load_config_file(path_str: str | None, problems: list[str]) -> dict:
    if path_str is None:
        return {}
    path = Path(path_str)
    if not path.is_file():
        problems.append(f"config file not found: {path}")
        return {}
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        problems.append(f"config file {path} is not valid JSON: {err}")
        return {}
    if not isinstance(payload, dict):
        problems.append(f"config file {path} must hold a JSON object")
        return {}
    return payload


def _resolve_train_config(args, file_cfg: dict, problems: list[str]) -> TrainConfig | None:
    base = config_to_dict(TrainConfig())
    known = set(base)
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        problems.append(f"unknown config keys: {', '.join(unknown)}")
    for key, value in file_cfg.items():
        if key not in known:
            continue
        if isinstance(base[key], dict) and isinstance(value, dict):
            bad = sorted(set(value) - set(base[key]))
            if bad:
                problems.append(f"unknown config keys under {key}: {', '.join(bad)}")
            base[key].update({k: v for k, v in value.items() if k in base[key]})
        else:
            base[key] = value

    for flag in ("approach", "steps", "batch_size", "checkpoint_every", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            base[flag] = value
    size = getattr(args, "image_size", None)
    if size is not None:
        if not _is_power_of_two(size):
            problems.append(f"image size must be a power of two >= 8, got {size}")
        else:
            base["a1_generator"]["image_size"] = [size, size]
            base["a2"]["image_size"] = [size, size]
    try:
        return config_from_dict(base)
    except (ValueError, TypeError) as err:
        problems.append(f"invalid configuration: {err}")
        return None


def _require_out(args, problems: list[str]) -> Path | None:
    if args.out is None:
        problems.append("--out is required")
        return None
    return Path(args.out)


# ---- synthesize ----


def _load_dir_images(directory: Path, size, problems: list[str], role: str) -> list:
    if not directory.is_dir():
        problems.append(f"{role} directory not found: {directory}")
        return []
    try:
        paths = list_images(directory)
    except (FileNotFoundError, ValueError) as err:
        problems.append(str(err))
        return []
    images = []
    for p in paths:
        try:
            images.append(load_and_preprocess(p, size))
        except OSError as err:
            problems.append(f"unreadable image {p}: {err}")
    return images


def cmd_synthesize(args) -> int:
    problems: list[str] = []
    file_cfg = _load_config_file(args.config, problems)
    out = _require_out(args, problems)
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))
    size = args.size if args.size is not None else int(file_cfg.get("image_size", 128))
    if not _is_power_of_two(size):
        problems.append(f"image size must be a power of two >= 8, got {size}")
    contents_dir = Path(args.contents) if args.contents else None
    styles_dir = Path(args.styles) if args.styles else None
    if contents_dir is None:
        problems.append("--contents is required")
    if styles_dir is None:
        problems.append("--styles is required")
    if problems:
        raise ValidationError(problems)

    started = _iso_now()
    contents = _load_dir_images(contents_dir, (size, size), problems, "content")
    class_dirs = (
        sorted(d for d in styles_dir.iterdir() if d.is_dir())
        if styles_dir.is_dir()
        else []
    )
    style_images: list = []
    labels: list[int] = []
    class_names: list[str] = []
    if class_dirs:
        for label, class_dir in enumerate(class_dirs):
            class_names.append(class_dir.name)
            members = _load_dir_images(class_dir, (size, size), problems, f"style class {class_dir.name}")
            style_images.extend(members)
            labels.extend([label] * len(members))
    else:
        style_images = _load_dir_images(styles_dir, (size, size), problems, "style")
    if not problems and not contents:
        problems.append(f"no usable content images in {contents_dir}")
    if not problems and not style_images:
        problems.append(f"no usable style images in {styles_dir}")
    if problems:
        raise ValidationError(problems)

    matrix = synthesize_image_matrix(
        contents, style_images, lambda c, s: procedural_stylizer(c, s, seed)
    )
    out.mkdir(parents=True, exist_ok=True)
    save_image_matrix(matrix, out / "matrix")
    outputs = {"matrix": str(out / "matrix")}
    if class_dirs:
        corpus = StyleCorpus(images=style_images, labels=labels, class_names=class_names)
        save_style_corpus(corpus, out / "corpus")
        outputs["corpus"] = str(out / "corpus")

    resolved = {"image_size": size, "seed": seed, "n_contents": len(contents), "n_styles": len(style_images)}
    RunManifest(
        command="synthesize",
        config=resolved,
        config_hash=_dict_hash(resolved),
        seed=seed,
        inputs={"contents": str(contents_dir), "styles": str(styles_dir)},
        outputs=outputs,
        started_at=started,
    ).write(out)
    print(
        f"synthesized {matrix.n}x{matrix.m} matrix"
        + (f" and {len(class_names)}-class corpus" if class_dirs else "")
        + f" into {out}"
    )
    return 0


# ---- train ----


def _looks_like_corpus(root: Path) -> bool:
    manifest = root / "manifest.json"
    if not manifest.is_file():
        return False
    try:
        payload = json.loads(manifest.read_text())
    except json.JSONDecodeError:
        return False
    return isinstance(payload, dict) and "classes" in payload and "files" in payload


def _find_corpus_root(data_dir: Path) -> Path | None:
    for candidate in (data_dir / "corpus", data_dir):
        if _looks_like_corpus(candidate):
            return candidate
    return None


def _resolve_handles(
    data_dir: Path, config: TrainConfig, problems: list[str]
) -> DataHandles:
    handles = DataHandles()
    matrix_root = None
    if (data_dir / "matrix" / "matrix.json").is_file():
        matrix_root = data_dir / "matrix"
    elif (data_dir / "matrix.json").is_file():
        matrix_root = data_dir
    if config.approach == "a1":
        if matrix_root is None:
            problems.append(f"no image-matrix store under {data_dir} (expected matrix.json)")
        else:
            handles.matrix = load_image_matrix(matrix_root)
            expected = tuple(config.a1_generator.image_size)
            got = tuple(handles.matrix.contents[0].shape[:2])
            if got != expected:
                problems.append(
                    f"matrix images are {got[0]}x{got[1]} but the model expects "
                    f"{expected[0]}x{expected[1]}"
                )
    else:
        corpus_root = _find_corpus_root(data_dir)
        if corpus_root is None:
            problems.append(f"no labeled style corpus under {data_dir}")
        else:
            handles.style_corpus = load_style_corpus(corpus_root)
            if len(set(handles.style_corpus.labels)) < 2:
                problems.append("style corpus has fewer than 2 classes")
        if matrix_root is not None:
            handles.contents = load_image_matrix(matrix_root).contents
        elif (data_dir / "contents").is_dir():
            handles.contents = _load_dir_images(
                data_dir / "contents", config.a2.image_size, problems, "content"
            )
        else:
            problems.append(f"no content images under {data_dir}")
        if handles.contents:
            expected = tuple(config.a2.image_size)
            got = tuple(handles.contents[0].shape[:2])
            if got != expected:
                problems.append(
                    f"content images are {got[0]}x{got[1]} but the model expects "
                    f"{expected[0]}x{expected[1]}"
                )
    return handles


def cmd_train(args) -> int:
    problems: list[str] = []
    file_cfg = _load_config_file(args.config, problems)
    out = _require_out(args, problems)
    config = _resolve_train_config(args, file_cfg, problems)
    handles = None
    if args.data is None:
        problems.append("--data is required")
    elif not Path(args.data).is_dir():
        problems.append(f"data directory not found: {args.data}")
    elif config is not None:
        handles = _resolve_handles(Path(args.data), config, problems)
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not (resume / "manifest.json").is_file():
        problems.append(f"resume checkpoint not found: {resume}")
    if problems:
        raise ValidationError(problems)

    started = _iso_now()
    state, metrics = train_loop(config, handles, out_dir=out, resume_from=resume)
    checkpoints = sorted(str(p) for p in out.glob("checkpoint_step_*") if p.is_dir())
    RunManifest(
        command="train",
        config=config_to_dict(config),
        config_hash=config_hash(config),
        seed=config.seed,
        inputs={"data": str(args.data), "resume": str(resume) if resume else None},
        outputs={"metrics": str(out / "metrics.jsonl"), "checkpoints": checkpoints},
        started_at=started,
    ).write(out)
    last = metrics[-1] if metrics else None
    summary = f"g_total={last.g_total:.4f} d_content={last.d_content:.4f}" if last else "no steps run"
    print(f"trained {config.approach} to step {state.step} ({summary}); wrote {out}")
    return 0


# ---- transfer ----


def _transfer_fn(state):
    if state.config.approach == "a1":
        generator = state.models["generator"]
        return lambda content, style: generator_a1_forward(generator, content, style)
    bundle = A2Models(
        config=state.config.a2,
        content_encoder=state.models["content_encoder"],
        style_encoder=state.models["style_encoder"],
        decoder=state.models["decoder"],
    )
    return lambda content, style: generator_a2_forward(bundle, content, style)


def _image_size_of(config: TrainConfig) -> tuple[int, int]:
    if config.approach == "a1":
        return tuple(config.a1_generator.image_size)
    return tuple(config.a2.image_size)


def cmd_transfer(args) -> int:
    problems: list[str] = []
    _load_config_file(args.config, problems)
    out = _require_out(args, problems)
    for flag, value in (("--checkpoint", args.checkpoint), ("--content", args.content), ("--style", args.style)):
        if value is None:
            problems.append(f"{flag} is required")
    if args.checkpoint and not (Path(args.checkpoint) / "manifest.json").is_file():
        problems.append(f"checkpoint not found: {args.checkpoint}")
    for label, value in (("content", args.content), ("style", args.style)):
        if value is not None and not Path(value).is_file():
            problems.append(f"{label} image not found: {value}")
    if problems:
        raise ValidationError(problems)

    started = _iso_now()
    t0 = time.monotonic()
    state = load_checkpoint(args.checkpoint)
    if args.approach is not None and args.approach != state.config.approach:
        raise ValidationError(
            [
                f"checkpoint holds approach {state.config.approach!r} but "
                f"--approach {args.approach!r} was requested"
            ]
        )
    size = _image_size_of(state.config)
    content = load_and_preprocess(args.content, size)
    style = load_and_preprocess(args.style, size)
    stylized = _transfer_fn(state)(content, style)
    out.mkdir(parents=True, exist_ok=True)
    save_image(stylized, out / "stylized.png")
    wall = time.monotonic() - t0
    RunManifest(
        command="transfer",
        config={"checkpoint": str(args.checkpoint), "image_size": list(size)},
        config_hash=_dict_hash({"checkpoint_config": config_to_dict(state.config)}),
        seed=state.config.seed,
        inputs={"content": str(args.content), "style": str(args.style)},
        outputs={"stylized": str(out / "stylized.png")},
        started_at=started,
    ).write(out)
    print(f"transfer wall time: {wall:.3f} s; wrote {out / 'stylized.png'}")
    return 0


# ---- eval ----


class _DiscEmbedder(torch.nn.Module):
    """Adapts the A1 style discriminator's per-image embedding to the
    plain forward(batch) interface the corpus embedder expects."""

    def __init__(self, disc):
        super().__init__()
        self.disc = disc

    def forward(self, x):
        return self.disc.embed(x)


def _parse_grid(text: str, problems: list[str]) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
        problems.append(f"--grid must look like RxC (e.g. 2x3), got {text!r}")
        return 0, 0
    return int(parts[0]), int(parts[1])


def cmd_eval(args) -> int:
    problems: list[str] = []
    _load_config_file(args.config, problems)
    out = _require_out(args, problems)
    if args.checkpoint is None:
        problems.append("--checkpoint is required")
    elif not (Path(args.checkpoint) / "manifest.json").is_file():
        problems.append(f"checkpoint not found: {args.checkpoint}")
    if args.data is None:
        problems.append("--data is required")
    elif not Path(args.data).is_dir():
        problems.append(f"data directory not found: {args.data}")
    rows, cols = _parse_grid(args.grid, problems)
    if problems:
        raise ValidationError(problems)

    started = _iso_now()
    state = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    handle_problems: list[str] = []
    corpus_root = _find_corpus_root(data_dir)
    if corpus_root is None:
        raise ValidationError([f"no labeled style corpus under {data_dir}"])
    corpus = load_style_corpus(corpus_root)

    if state.config.approach == "a2":
        embedder = state.models["style_encoder"]
    else:
        embedder = _DiscEmbedder(state.models["style_disc"])
    embeddings, labels = embed_corpus(embedder, corpus)
    report = cluster_quality(embeddings, labels, class_names=corpus.class_names)

    matrix_root = data_dir / "matrix" if (data_dir / "matrix" / "matrix.json").is_file() else data_dir
    if (matrix_root / "matrix.json").is_file():
        contents = load_image_matrix(matrix_root).contents
    elif (data_dir / "contents").is_dir():
        contents = _load_dir_images(
            data_dir / "contents", _image_size_of(state.config), handle_problems, "content"
        )
    else:
        raise ValidationError([f"no content images under {data_dir} for the eval grid"])
    if handle_problems:
        raise ValidationError(handle_problems)
    if rows > len(contents) or cols > len(corpus.images):
        raise ValidationError(
            [
                f"--grid {rows}x{cols} exceeds available images "
                f"({len(contents)} contents, {len(corpus.images)} styles)"
            ]
        )

    out.mkdir(parents=True, exist_ok=True)
    report_payload = report.to_dict()
    report_payload["approach"] = state.config.approach
    (out / "report.json").write_text(json.dumps(report_payload, indent=2, sort_keys=True) + "\n")
    export_eval_grid(
        _transfer_fn(state), contents[:rows], list(corpus.images[:cols]), out / "grid.png"
    )
    export_pca_scatter(embeddings, labels, out / "pca.csv")

    cfg = state.config
    a1_models = {
        "generator": build_generator_a1(cfg.a1_generator),
        "patch_disc": build_patch_discriminator(cfg.a1_patch),
        "style_disc": build_wavelet_style_discriminator(cfg.a1_style),
    }
    a2_bundle = build_a2_models(cfg.a2)
    comparison = compare_param_counts(
        a1_models,
        {
            "content_encoder": a2_bundle.content_encoder,
            "style_encoder": a2_bundle.style_encoder,
            "decoder": a2_bundle.decoder,
        },
    )
    (out / "param_counts.json").write_text(
        json.dumps(comparison.to_dict(), indent=2, sort_keys=True) + "\n"
    )

    RunManifest(
        command="eval",
        config={"checkpoint": str(args.checkpoint), "grid": f"{rows}x{cols}"},
        config_hash=_dict_hash({"checkpoint_config": config_to_dict(state.config)}),
        seed=state.config.seed,
        inputs={"data": str(data_dir)},
        outputs={
            "report": str(out / "report.json"),
            "grid": str(out / "grid.png"),
            "pca": str(out / "pca.csv"),
            "param_counts": str(out / "param_counts.json"),
        },
        started_at=started,
    ).write(out)
    print(
        f"eval: silhouette={report.silhouette:.3f} accuracy={report.accuracy:.3f}; wrote {out}"
    )
    return 0


# ---- parser & entry point ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgan",
        description="Multi-style artistic transfer: synthesis, training, inference, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int, help="base RNG seed")
    common.add_argument("--out", help="output directory")

    p = sub.add_parser("synthesize", parents=[common], help="build an image-matrix store")
    p.add_argument("--contents", help="directory of content images")
    p.add_argument("--styles", help="directory of style images (subdirectories become labeled classes)")
    p.add_argument("--size", type=int, help="square image size (power of two, default 128)")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", parents=[common], help="run a training loop")
    p.add_argument("--data", help="directory produced by synthesize (or compatible)")
    p.add_argument("--approach", choices=["a1", "a2"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", parents=[common], help="stylize one content/style pair")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--content", help="content image path")
    p.add_argument("--style", help="style image path")
    p.add_argument("--approach", choices=["a1", "a2"], help="assert the checkpoint's approach")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", parents=[common], help="embedding quality report and visual grid")
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--data", help="directory with a labeled style corpus (and contents)")
    p.add_argument("--grid", default="2x2", help="grid size RxC for the visual export")
    p.set_defaults(func=cmd_eval)
    return parser


def _quarantine(out_path: Path) -> Path | None:
    if not out_path.exists():
        return None
    dest = Path(str(out_path) + ".failed")
    if dest.exists():
        shutil.rmtree(dest)
    os.replace(out_path, dest)
    return dest


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    env_problem = _thread_env_problem()
    if env_problem:
        print(f"error: {env_problem}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ValidationError as err:
        for problem in err.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - single CLI failure boundary
        print(f"error: {err}", file=sys.stderr)
        if args.out is not None:
            quarantined = _quarantine(Path(args.out))
            if quarantined is not None:
                print(f"partial outputs moved to {quarantined}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
