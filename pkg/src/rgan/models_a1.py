"""Approach-1 networks.

A U-Net generator over the stacked 6-channel (content, style) input
with an explicit low-dimensional bottleneck vector, a Markovian
patch-grid content discriminator, and a wavelet-CNN style discriminator
whose shared trunk embeds each image of a pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .tensorops import stack_pair, to_hwc, to_nchw
from .wavelet import dwt_level


def seeded_init_(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically reinitialize every parameter from the seed.

    Conv/linear weights ~ N(0, 0.02); norm gains ~ N(1, 0.02); biases 0.
    Asserts full coverage so a new layer type cannot slip past unseeded.
    """
    touched = set()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                nn.init.normal_(m.weight, 0.0, 0.02)
                touched.add(id(m.weight))
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
                    touched.add(id(m.bias))
            elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)):
                if m.weight is not None:
                    nn.init.normal_(m.weight, 1.0, 0.02)
                    nn.init.zeros_(m.bias)
                    touched.update((id(m.weight), id(m.bias)))
    missed = [n for n, p in module.named_parameters() if id(p) not in touched]
    if missed:
        raise RuntimeError(f"seeded_init_ missed parameters: {missed}")
    return module


def param_count(model: nn.Module) -> int:
    """Total trainable scalar parameters (frozen ones excluded)."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---- generator ----


@dataclass(frozen=True)
class GeneratorA1Config:
    image_size: tuple[int, int] = (128, 128)
    base_channels: int = 64
    depth: int = 4
    bottleneck_dim: int = 64
    dropout_rate: float = 0.5

    def __post_init__(self):
        problems = []
        h, w = self.image_size
        for name, v in (("height", h), ("width", w)):
            if v < 2 or v & (v - 1):
                problems.append(f"image_size {name} {v} is not a power of two")
        if self.depth < 1:
            problems.append(f"depth {self.depth} must be >= 1")
        elif min(h, w) < 2**self.depth:
            problems.append(
                f"image_size {self.image_size} too small for depth {self.depth}"
            )
        if self.base_channels < 1:
            problems.append(f"base_channels {self.base_channels} must be >= 1")
        if self.bottleneck_dim < 1:
            problems.append(f"bottleneck_dim {self.bottleneck_dim} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate {self.dropout_rate} must be in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))


class GeneratorA1(nn.Module):
    """U-Net on a 6-channel input with a bottleneck vector.

    Encoder: Conv(4, stride 2)-BatchNorm-ReLU per level, widths doubling
    (capped at 8x base). The deepest feature map is flattened through a
    linear pair down to ``bottleneck_dim`` and back. Decoder mirrors the
    encoder with transposed convs; train-time dropout in the up blocks is
    the model's only noise source. One skip concat per level (the deepest
    skip routes around the bottleneck), so skip count = depth.
    """

    def __init__(self, cfg: GeneratorA1Config):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * min(2**i, 8) for i in range(cfg.depth)]
        enc = []
        in_ch = 6
        for c in chans:
            enc.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, c, 4, 2, 1),
                    nn.BatchNorm2d(c),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = c
        self.encoder = nn.ModuleList(enc)

        gh, gw = cfg.image_size[0] >> cfg.depth, cfg.image_size[1] >> cfg.depth
        self._grid = (chans[-1], gh, gw)
        flat = chans[-1] * gh * gw
        self.to_bottleneck = nn.Linear(flat, cfg.bottleneck_dim)
        self.from_bottleneck = nn.Linear(cfg.bottleneck_dim, flat)

        dec = []
        for i in range(cfg.depth, 0, -1):
            in_c = 2 * chans[i - 1]
            if i >= 2:
                dec.append(
                    nn.Sequential(
                        nn.ConvTranspose2d(in_c, chans[i - 2], 4, 2, 1),
                        nn.BatchNorm2d(chans[i - 2]),
                        nn.ReLU(inplace=True),
                        nn.Dropout(cfg.dropout_rate),
                    )
                )
            else:
                dec.append(
                    nn.Sequential(nn.ConvTranspose2d(in_c, 3, 4, 2, 1), nn.Tanh())
                )
        self.decoder = nn.ModuleList(dec)
        self.skip_connections = cfg.depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 6:
            raise ValueError(f"expected (N, 6, H, W) input, got {tuple(x.shape)}")
        if (x.shape[2], x.shape[3]) != self.cfg.image_size:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} != configured {self.cfg.image_size}"
            )
        skips = []
        h = x
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        z = torch.relu(self.to_bottleneck(h.flatten(1)))
        h = torch.relu(self.from_bottleneck(z)).reshape(h.shape[0], *self._grid)
        for block, skip in zip(self.decoder, reversed(skips)):
            h = block(torch.cat([h, skip], dim=1))
        return h


def build_generator_a1(cfg: GeneratorA1Config | None = None, seed: int = 0) -> GeneratorA1:
    return seeded_init_(GeneratorA1(cfg or GeneratorA1Config()), seed)


def generator_a1_forward(model: GeneratorA1, content, style, train_mode: bool = False):
    """Single-image forward: (H, W, 3) pair in [-1, 1] -> (H, W, 3) in (-1, 1).

    Dropout (and batch-statistics normalization) active only in train_mode;
    train-mode randomness is whatever the caller seeded globally.
    """
    x = stack_pair(content, style)
    was_training = model.training
    model.train(train_mode)
    try:
        if train_mode:
            out = model(x)
        else:
            with torch.no_grad():
                out = model(x)
    finally:
        model.train(was_training)
    return to_hwc(out)


# ---- patch content discriminator ----


@dataclass(frozen=True)
class PatchDiscriminatorConfig:
    in_channels: int = 6
    base_channels: int = 64
    strided_levels: int = 3

    def __post_init__(self):
        problems = []
        if self.in_channels < 1:
            problems.append(f"in_channels {self.in_channels} must be >= 1")
        if self.base_channels < 1:
            problems.append(f"base_channels {self.base_channels} must be >= 1")
        if self.strided_levels < 1:
            problems.append(f"strided_levels {self.strided_levels} must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class PatchMap:
    """Grid of per-patch real-image probabilities."""

    probs: torch.Tensor
    receptive_field: int


def _receptive_field(specs: list[tuple[int, int]]) -> int:
    rf = 1
    for k, s in reversed(specs):
        rf = rf * s + (k - s)
    return rf


class PatchDiscriminator(nn.Module):
    """Markovian patch classifier over a 6-channel (condition, candidate)
    stack: stride-2 conv levels, two stride-1 convs, sigmoid map. The
    default 3-level configuration has a 70-pixel receptive field."""

    def __init__(self, cfg: PatchDiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        specs = []
        in_ch = cfg.in_channels
        for i in range(cfg.strided_levels):
            out_ch = cfg.base_channels * min(2**i, 8)
            layers.append(nn.Conv2d(in_ch, out_ch, 4, 2, 1))
            if i > 0:
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            specs.append((4, 2))
            in_ch = out_ch
        out_ch = cfg.base_channels * min(2**cfg.strided_levels, 8)
        layers += [
            nn.Conv2d(in_ch, out_ch, 4, 1, 1),
            nn.BatchNorm2d(out_ch),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        specs.append((4, 1))
        layers += [nn.Conv2d(out_ch, 1, 4, 1, 1), nn.Sigmoid()]
        specs.append((4, 1))
        self.net = nn.Sequential(*layers)
        self.receptive_field = _receptive_field(specs)
        self.forward_calls = 0  # invocation audit for the training contract

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected (N, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        self.forward_calls += 1
        return self.net(x)


def build_patch_discriminator(
    cfg: PatchDiscriminatorConfig | None = None, seed: int = 0
) -> PatchDiscriminator:
    return seeded_init_(PatchDiscriminator(cfg or PatchDiscriminatorConfig()), seed)


def patch_disc_forward(model: PatchDiscriminator, condition, candidate) -> PatchMap:
    x = stack_pair(condition, candidate)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            probs = model(x)
    finally:
        model.train(was_training)
    return PatchMap(probs=probs[0, 0], receptive_field=model.receptive_field)


# ---- wavelet style discriminator ----


@dataclass(frozen=True)
class StyleDiscriminatorConfig:
    levels: int = 3
    base_channels: int = 16
    embedding_dim: int = 64
    in_channels: int = 3

    def __post_init__(self):
        problems = []
        if self.levels < 1:
            problems.append(f"levels {self.levels} must be >= 1")
        if self.base_channels < 1:
            problems.append(f"base_channels {self.base_channels} must be >= 1")
        if self.embedding_dim < 2 or self.embedding_dim % 2:
            problems.append(
                f"embedding_dim {self.embedding_dim} must be an even integer >= 2"
            )
        if self.in_channels < 1:
            problems.append(f"in_channels {self.in_channels} must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))


def _in_block(in_ch: int, out_ch: int, kernel: int, stride: int, pad: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride, pad),
        nn.InstanceNorm2d(out_ch, affine=True),
        nn.LeakyReLU(0.2, inplace=True),
    )


class WaveletStyleDiscriminator(nn.Module):
    """Shared-trunk pair embedder over Haar subband stacks.

    Each image is decomposed into per-level (LL, LH, HL, HH) channel
    stacks. The trunk starts from the level-1 stack and downsamples by
    strided conv; at each deeper resolution the matching level's stack is
    projected by a 1x1 conv and added channel-wise, then refined. Global
    average pooling and a linear head give an embedding_dim/2 vector per
    image; forward() returns the pair's concatenated joint embedding.
    Instance normalization throughout.
    """

    def __init__(self, cfg: StyleDiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        stack_ch = 4 * cfg.in_channels
        chans = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        self.entry = _in_block(stack_ch, chans[0], 3, 1, 1)
        self.downs = nn.ModuleList(
            _in_block(chans[i - 1], chans[i], 4, 2, 1) for i in range(1, cfg.levels)
        )
        self.projections = nn.ModuleList(
            nn.Conv2d(stack_ch, chans[i], 1) for i in range(1, cfg.levels)
        )
        self.fusers = nn.ModuleList(
            _in_block(chans[i], chans[i], 3, 1, 1) for i in range(1, cfg.levels)
        )
        self.head = nn.Linear(chans[-1], cfg.embedding_dim // 2)
        self.forward_calls = 0  # invocation audit for the training contract

    def decompose(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-level 4C-channel subband stacks of an NCHW batch."""
        h, w = x.shape[-2], x.shape[-1]
        div = 2**self.cfg.levels
        if h % div or w % div:
            raise ValueError(
                f"input {h}x{w} not divisible by 2^{self.cfg.levels}; "
                "power-of-two sizes required"
            )
        stacks = []
        current = x
        for _ in range(self.cfg.levels):
            ll, lh, hl, hh = dwt_level(current)
            stacks.append(torch.cat([ll, lh, hl, hh], dim=1))
            current = ll
        return stacks

    def embed_stacks(self, stacks: list[torch.Tensor]) -> torch.Tensor:
        if len(stacks) != self.cfg.levels:
            raise ValueError(f"expected {self.cfg.levels} level stacks, got {len(stacks)}")
        h = self.entry(stacks[0])
        for down, proj, fuse, stack in zip(self.downs, self.projections, self.fusers, stacks[1:]):
            h = down(h)
            h = h + proj(stack)
            h = fuse(h)
        return self.head(h.mean(dim=(2, 3)))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Trunk embedding of an NCHW batch: (N, embedding_dim // 2)."""
        return self.embed_stacks(self.decompose(images))

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        self.forward_calls += 1
        return torch.cat([self.embed(a), self.embed(b)], dim=1)


def build_wavelet_style_discriminator(
    cfg: StyleDiscriminatorConfig | None = None, seed: int = 0
) -> WaveletStyleDiscriminator:
    return seeded_init_(
        WaveletStyleDiscriminator(cfg or StyleDiscriminatorConfig()), seed
    )


def style_disc_forward(model: WaveletStyleDiscriminator, style, candidate) -> torch.Tensor:
    """Joint embedding of a single (style, candidate) image pair."""
    a = to_nchw(style)
    b = to_nchw(candidate)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            joint = model(a, b)
    finally:
        model.train(was_training)
    return joint.squeeze(0)
