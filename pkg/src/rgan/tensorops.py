"""Layout conversions between (H, W, C) images and NCHW model batches."""

from __future__ import annotations

import torch


def to_float_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.dtype.is_floating_point:
        t = t.to(torch.float32)
    return t


def to_nchw(image) -> torch.Tensor:
    """(H, W, C) image or (N, H, W, C) batch -> (N, C, H, W)."""
    t = to_float_tensor(image)
    if t.ndim == 3:
        return t.permute(2, 0, 1).unsqueeze(0)
    if t.ndim == 4:
        return t.permute(0, 3, 1, 2)
    raise ValueError(f"expected (H, W, C) or (N, H, W, C), got shape {tuple(t.shape)}")


def to_hwc(batch: torch.Tensor, squeeze: bool = True) -> torch.Tensor:
    """(N, C, H, W) -> (N, H, W, C), squeezed to (H, W, C) when N=1."""
    if batch.ndim != 4:
        raise ValueError(f"expected NCHW batch, got shape {tuple(batch.shape)}")
    out = batch.permute(0, 2, 3, 1)
    if squeeze and out.shape[0] == 1:
        return out.squeeze(0)
    return out


def stack_pair(a, b) -> torch.Tensor:
    """Two (H, W, 3) images or (N, H, W, 3) batches -> 6-channel NCHW."""
    ta, tb = to_float_tensor(a), to_float_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return torch.cat([to_nchw(ta), to_nchw(tb)], dim=1)
