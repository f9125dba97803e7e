"""Approach-2 networks.

A content encoder with a hard 32-dim latent plus per-level skip rasters,
a densely connected style encoder trained by metric learning, and a
decoder seeded from the style latent alone. The decoder never sees the
content latent; content structure reaches it only through the skips.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .models_a1 import param_count, seeded_init_
from .tensorops import to_hwc, to_nchw

CONTENT_LATENT_DIM = 32


@dataclass(frozen=True)
class A2Config:
    image_size: tuple[int, int] = (128, 128)
    content_base_channels: int = 32
    content_depth: int = 4
    style_init_channels: int = 16
    style_growth_rate: int = 12
    style_layers_per_block: int = 3
    style_blocks: int = 3
    style_latent_dim: int = 64

    def __post_init__(self):
        problems = []
        h, w = self.image_size
        for name, v in (("height", h), ("width", w)):
            if v < 2 or v & (v - 1):
                problems.append(f"image_size {name} {v} is not a power of two")
        if self.content_depth < 1:
            problems.append(f"content_depth {self.content_depth} must be >= 1")
        elif min(h, w) < 2 ** (self.content_depth + 1):
            problems.append(
                f"image_size {self.image_size} too small for content_depth "
                f"{self.content_depth}"
            )
        for name in (
            "content_base_channels",
            "style_init_channels",
            "style_growth_rate",
            "style_layers_per_block",
            "style_blocks",
            "style_latent_dim",
        ):
            if getattr(self, name) < 1:
                problems.append(f"{name} {getattr(self, name)} must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    def content_channels(self, level: int) -> int:
        return self.content_base_channels * min(2**level, 8)


@dataclass
class ContentEncoding:
    """32-dim latent plus skip rasters ordered shallow to deep."""

    latent: torch.Tensor
    skips: list

    def __post_init__(self):
        if self.latent.shape[-1] != CONTENT_LATENT_DIM:
            raise ValueError(
                f"content latent must have length {CONTENT_LATENT_DIM}, "
                f"got {self.latent.shape[-1]}"
            )


@dataclass
class StyleEncoding:
    latent: torch.Tensor


class ContentEncoder(nn.Module):
    """Conv-BatchNorm-ReLU stack: one stride-1 block at full resolution,
    stride-2 blocks below it (one skip per level), a final stride-2 stage,
    then flatten and project to the 32-dim latent."""

    def __init__(self, cfg: A2Config):
        super().__init__()
        self.cfg = cfg
        blocks = []
        in_ch = 3
        for i in range(cfg.content_depth):
            out_ch = cfg.content_channels(i)
            stride = 1 if i == 0 else 2
            kernel = 3 if i == 0 else 4
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, kernel, stride, 1),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        deep_ch = cfg.content_channels(cfg.content_depth)
        self.final = nn.Sequential(
            nn.Conv2d(in_ch, deep_ch, 4, 2, 1),
            nn.BatchNorm2d(deep_ch),
            nn.ReLU(inplace=True),
        )
        h, w = cfg.image_size
        gh, gw = h >> cfg.content_depth, w >> cfg.content_depth
        self.to_latent = nn.Linear(deep_ch * gh * gw, CONTENT_LATENT_DIM)
        self.forward_calls = 0

    def forward(self, x: torch.Tensor):
        """NCHW batch -> (latent (N, 32), skips shallow-to-deep)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        if (x.shape[2], x.shape[3]) != self.cfg.image_size:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} != configured {self.cfg.image_size}"
            )
        self.forward_calls += 1
        skips = []
        h = x
        for block in self.blocks:
            h = block(h)
            skips.append(h)
        h = self.final(h)
        latent = self.to_latent(h.flatten(1))
        return latent, skips


class _DenseLayer(nn.Module):
    def __init__(self, in_channels: int, growth_rate: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(in_channels)
        self.conv = nn.Conv2d(in_channels, growth_rate, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.relu(self.norm(x)))


class _DenseBlock(nn.Module):
    """Each layer consumes the concatenation of the block input and every
    earlier layer's output; channel count grows by growth_rate per layer."""

    def __init__(self, in_channels: int, growth_rate: int, n_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(
            _DenseLayer(in_channels + i * growth_rate, growth_rate)
            for i in range(n_layers)
        )
        self.out_channels = in_channels + n_layers * growth_rate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = [x]
        for layer in self.layers:
            features.append(layer(torch.cat(features, dim=1)))
        return torch.cat(features, dim=1)


class _Transition(nn.Module):
    """1x1 projection (half the channels) followed by 2x average pooling."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.out_channels = in_channels // 2
        self.norm = nn.BatchNorm2d(in_channels)
        self.conv = nn.Conv2d(in_channels, self.out_channels, 1)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.conv(torch.relu(self.norm(x))))


class StyleEncoder(nn.Module):
    """Dense-connectivity trunk, global average pool, linear projection."""

    def __init__(self, cfg: A2Config):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(3, cfg.style_init_channels, 3, 1, 1)
        blocks = []
        transitions = []
        ch = cfg.style_init_channels
        for b in range(cfg.style_blocks):
            block = _DenseBlock(ch, cfg.style_growth_rate, cfg.style_layers_per_block)
            blocks.append(block)
            ch = block.out_channels
            if b < cfg.style_blocks - 1:
                tr = _Transition(ch)
                transitions.append(tr)
                ch = tr.out_channels
        self.blocks = nn.ModuleList(blocks)
        self.transitions = nn.ModuleList(transitions)
        self.final_norm = nn.BatchNorm2d(ch)
        self.head = nn.Linear(ch, cfg.style_latent_dim)
        self.forward_calls = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        div = 2 ** (self.cfg.style_blocks - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"spatial size {tuple(x.shape[2:])} not divisible by {div} "
                f"(one 2x pool per transition)"
            )
        self.forward_calls += 1
        h = self.stem(x)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.transitions):
                h = self.transitions[i](h)
        h = torch.relu(self.final_norm(h))
        return self.head(h.mean(dim=(2, 3)))


class DecoderA2(nn.Module):
    """Upsampling stack seeded by the style latent.

    The latent is projected and reshaped to the deepest grid; each up
    block doubles resolution and concatenates the matching content skip.
    Content information enters only through those skips. No noise path.
    """

    def __init__(self, cfg: A2Config):
        super().__init__()
        self.cfg = cfg
        h, w = cfg.image_size
        self.grid = (
            cfg.content_channels(cfg.content_depth),
            h >> cfg.content_depth,
            w >> cfg.content_depth,
        )
        self.seed = nn.Linear(cfg.style_latent_dim, self.grid[0] * self.grid[1] * self.grid[2])
        ups = []
        cur = self.grid[0]
        for i in range(cfg.content_depth - 1, -1, -1):
            out_ch = cfg.content_channels(i)
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(cur, out_ch, 4, 2, 1),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            cur = out_ch + cfg.content_channels(i)  # up path + skip concat
        self.ups = nn.ModuleList(ups)
        self.out = nn.Sequential(nn.Conv2d(cur, 3, 3, 1, 1), nn.Tanh())
        self.forward_calls = 0

    def expected_skip_shape(self, level: int, batch: int) -> tuple[int, int, int, int]:
        h, w = self.cfg.image_size
        return (batch, self.cfg.content_channels(level), h >> level, w >> level)

    def forward(self, style_latent: torch.Tensor, skips: list) -> torch.Tensor:
        if style_latent.ndim == 1:
            style_latent = style_latent.unsqueeze(0)
        if style_latent.shape[-1] != self.cfg.style_latent_dim:
            raise ValueError(
                f"style latent length {style_latent.shape[-1]} != "
                f"configured {self.cfg.style_latent_dim}"
            )
        if len(skips) != self.cfg.content_depth:
            raise ValueError(
                f"expected {self.cfg.content_depth} skips, got {len(skips)}"
            )
        n = style_latent.shape[0]
        for level, skip in enumerate(skips):
            want = self.expected_skip_shape(level, n)
            if tuple(skip.shape) != want:
                raise ValueError(
                    f"skip level {level} has shape {tuple(skip.shape)}, expected {want}"
                )
        self.forward_calls += 1
        h = torch.relu(self.seed(style_latent)).reshape(n, *self.grid)
        for up, skip in zip(self.ups, reversed(skips)):
            h = up(h)
            h = torch.cat([h, skip], dim=1)
        return self.out(h)


@dataclass
class A2Models:
    config: A2Config
    content_encoder: ContentEncoder
    style_encoder: StyleEncoder
    decoder: DecoderA2

    def modules(self):
        return (self.content_encoder, self.style_encoder, self.decoder)


def build_a2_models(cfg: A2Config | None = None, seed: int = 0) -> A2Models:
    cfg = cfg or A2Config()
    return A2Models(
        config=cfg,
        content_encoder=seeded_init_(ContentEncoder(cfg), seed),
        style_encoder=seeded_init_(StyleEncoder(cfg), seed + 1),
        decoder=seeded_init_(DecoderA2(cfg), seed + 2),
    )


def _single_image_eval(module: nn.Module, fn):
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            return fn()
    finally:
        module.train(was_training)


def content_encoder_forward(model: ContentEncoder, image) -> ContentEncoding:
    x = to_nchw(image)

    def run():
        latent, skips = model(x)
        return ContentEncoding(latent=latent.squeeze(0), skips=skips)

    return _single_image_eval(model, run)


def style_encoder_forward(model: StyleEncoder, image) -> StyleEncoding:
    x = to_nchw(image)
    return _single_image_eval(
        model, lambda: StyleEncoding(latent=model(x).squeeze(0))
    )


def decoder_forward(model: DecoderA2, style: StyleEncoding, skips: list):
    return _single_image_eval(
        model, lambda: to_hwc(model(style.latent, skips))
    )


def generator_a2_forward(models: A2Models, content, style):
    """decoder(style_encoder(style), content_encoder(content).skips)."""
    enc = content_encoder_forward(models.content_encoder, content)
    sty = style_encoder_forward(models.style_encoder, style)
    return decoder_forward(models.decoder, sty, enc.skips)
