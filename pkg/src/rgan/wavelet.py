"""2-D Haar multiresolution analysis.

Orthonormal Haar filters (2x2 kernels with +-1/2 entries), applied
recursively to the low-low band. Inputs must be exactly divisible by
2^levels so the transform stays invertible without padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch


class LevelBands(NamedTuple):
    """Subbands of one decomposition level (each half the parent size)."""

    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor


@dataclass
class SubbandPyramid:
    """Multi-level Haar decomposition of an image.

    ``bands[k]`` holds level k+1: shapes are (H/2^(k+1), W/2^(k+1), C).
    Every level keeps its LL band (the wavelet-CNN trunk consumes full
    per-level stacks), but only the deepest LL is non-redundant: the
    retained-coefficient set for energy/reconstruction purposes is the
    detail bands of every level plus the deepest LL.
    """

    base_shape: tuple[int, ...]
    bands: list[LevelBands]

    @property
    def levels(self) -> int:
        return len(self.bands)


def _as_float_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.dtype.is_floating_point:
        t = t.to(torch.float32)
    return t


def dwt_level(x: torch.Tensor) -> LevelBands:
    """One orthonormal Haar analysis step over the trailing two dims.

    Works on (..., H, W); H and W must be even.
    """
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 != 0:
        raise ValueError(f"height {h} not divisible by 2")
    if w % 2 != 0:
        raise ValueError(f"width {w} not divisible by 2")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a - b + c - d) * 0.5  # detail along width
    hl = (a + b - c - d) * 0.5  # detail along height
    hh = (a - b - c + d) * 0.5
    return LevelBands(ll, lh, hl, hh)


def idwt_level(bands: LevelBands) -> torch.Tensor:
    """Exact inverse of :func:`dwt_level` (synthesis kernels = transpose)."""
    ll, lh, hl, hh = bands
    for name, band in zip(("lh", "hl", "hh"), (lh, hl, hh)):
        if band.shape != ll.shape:
            raise ValueError(
                f"subband {name} has shape {tuple(band.shape)}, expected {tuple(ll.shape)}"
            )
    a = (ll + lh + hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    c = (ll + lh - hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    shape = list(ll.shape)
    shape[-2] *= 2
    shape[-1] *= 2
    out = torch.empty(shape, dtype=ll.dtype)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


def _spatial_first(image: torch.Tensor) -> torch.Tensor:
    # (H, W, C) -> (C, H, W); 2-D images pass through.
    if image.ndim == 2:
        return image
    if image.ndim == 3:
        return image.permute(2, 0, 1)
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {tuple(image.shape)}")


def _spatial_last(x: torch.Tensor, ndim: int) -> torch.Tensor:
    if ndim == 2:
        return x
    return x.permute(1, 2, 0)


def haar_dwt2(image, levels: int) -> SubbandPyramid:
    """Decompose an (H, W, C) or (H, W) image into a subband pyramid.

    H and W must be divisible by 2^levels; levels >= 1.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    img = _as_float_tensor(image)
    ndim = img.ndim
    x = _spatial_first(img)
    h, w = x.shape[-2], x.shape[-1]
    div = 2 ** levels
    if h % div != 0:
        raise ValueError(f"height {h} not divisible by 2^{levels}")
    if w % div != 0:
        raise ValueError(f"width {w} not divisible by 2^{levels}")

    bands = []
    current = x
    for _ in range(levels):
        level = dwt_level(current)
        bands.append(LevelBands(*(_spatial_last(band, ndim) for band in level)))
        current = level.ll
    return SubbandPyramid(base_shape=tuple(img.shape), bands=bands)


def haar_idwt2(pyramid: SubbandPyramid) -> torch.Tensor:
    """Reconstruct the image from a pyramid; inverse of :func:`haar_dwt2`."""
    if pyramid.levels < 1:
        raise ValueError("pyramid has no levels")
    ndim = len(pyramid.base_shape)
    current = _spatial_first(_as_float_tensor(pyramid.bands[-1].ll))
    for level in reversed(pyramid.bands):
        parts = [_spatial_first(_as_float_tensor(b)) for b in level]
        if parts[0].shape != current.shape:
            raise ValueError(
                f"LL band shape {tuple(parts[0].shape)} inconsistent with "
                f"reconstruction state {tuple(current.shape)}"
            )
        current = idwt_level(LevelBands(current, parts[1], parts[2], parts[3]))
    out = _spatial_last(current, ndim)
    if tuple(out.shape) != tuple(pyramid.base_shape):
        raise ValueError(
            f"reconstructed shape {tuple(out.shape)} != base shape {pyramid.base_shape}"
        )
    return out


def subband_energy(pyramid: SubbandPyramid) -> float:
    """Sum of squares over the retained coefficients.

    Retained set: detail bands of every level plus the deepest LL. With
    orthonormal filters this equals the input image's sum of squares.
    """
    total = 0.0
    for k, level in enumerate(pyramid.bands):
        for band in (level.lh, level.hl, level.hh):
            total += float(torch.sum(_as_float_tensor(band) ** 2))
        if k == len(pyramid.bands) - 1:
            total += float(torch.sum(_as_float_tensor(level.ll) ** 2))
    return total


def band_stack(pyramid: SubbandPyramid, level: int) -> torch.Tensor:
    """Channel-stacked (H_l, W_l, 4*C) view of one level, LL|LH|HL|HH order.

    Differentiable; the style discriminator consumes these stacks.
    """
    if not 1 <= level <= pyramid.levels:
        raise ValueError(f"level {level} outside 1..{pyramid.levels}")
    lb = pyramid.bands[level - 1]
    arrays = [_as_float_tensor(b) for b in lb]
    return torch.cat([a.reshape(a.shape[0], a.shape[1], -1) for a in arrays], dim=-1)
