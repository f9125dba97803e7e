"""Training objectives for both architectures.

Adversarial BCE (non-saturating generator form), the alpha-weighted
dual-adversarial combination, L1/SSIM reconstruction, the two-margin
pairwise marginal (contrastive) loss, and the Gram-similarity sparse
categorical cross-entropy used by the style encoder.

All functions preserve the input dtype, so float64 inputs give float64
arithmetic for finite-difference gradient checks.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

# Probability clamp for BCE terms: keeps every log finite.
EPS = 1e-7


class PairLabel(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1


@dataclass(frozen=True)
class AdversarialWeights:
    """Mixing weights: alpha trades style vs content adversarial signal,
    lambda_l1 scales the reconstruction term."""

    alpha: float = 0.5
    lambda_l1: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lambda_l1 < 0.0:
            raise ValueError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")


@dataclass(frozen=True)
class StyleBatchLabels:
    """Integer class index per style sample plus the similarity temperature."""

    ys: tuple
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "ys", tuple(int(y) for y in self.ys))
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if any(y < 0 for y in self.ys):
            raise ValueError("class indices must be nonnegative")


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.dtype.is_floating_point:
        t = t.to(torch.float32)
    return t


def bce_discriminator_loss(d_real, d_fake) -> torch.Tensor:
    """-mean(log d_real) - mean(log(1 - d_fake)), probabilities clamped."""
    real = _as_tensor(d_real)
    fake = _as_tensor(d_fake)
    if real.numel() == 0 or fake.numel() == 0:
        raise ValueError("empty probability batch")
    real = real.clamp(EPS, 1.0 - EPS)
    fake = fake.clamp(EPS, 1.0 - EPS)
    return -torch.mean(torch.log(real)) - torch.mean(torch.log(1.0 - fake))


def bce_generator_loss(d_fake) -> torch.Tensor:
    """Non-saturating generator objective: -mean(log d_fake)."""
    fake = _as_tensor(d_fake)
    if fake.numel() == 0:
        raise ValueError("empty probability batch")
    return -torch.mean(torch.log(fake.clamp(EPS, 1.0 - EPS)))


def rgan_combine(weights: AdversarialWeights, loss_style, loss_content):
    """alpha * loss_style + (1 - alpha) * loss_content."""
    return weights.alpha * loss_style + (1.0 - weights.alpha) * loss_content


def l1_loss(generated, target) -> torch.Tensor:
    gen = _as_tensor(generated)
    tgt = _as_tensor(target)
    if gen.shape != tgt.shape:
        raise ValueError(f"shape mismatch: {tuple(gen.shape)} vs {tuple(tgt.shape)}")
    return torch.mean(torch.abs(gen - tgt))


def pairwise_marginal_loss(emb_a, emb_b, label, margins=(0.0, 1.0)) -> torch.Tensor:
    """Two-margin contrastive loss on Euclidean embedding distance.

    Positive pairs pay max(0, d - m_pos)^2, negative pairs pay
    max(0, m_neg - d)^2. Accepts single embeddings or [B, d] batches;
    `label` is one PairLabel for all pairs or a per-pair sequence.
    """
    a = _as_tensor(emb_a)
    b = _as_tensor(emb_b)
    if a.shape != b.shape:
        raise ValueError(f"embedding shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    m_pos, m_neg = float(margins[0]), float(margins[1])
    if not 0.0 <= m_pos < m_neg:
        raise ValueError(f"margins must satisfy m_neg > m_pos >= 0, got {margins}")
    if a.ndim == 1:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    d2 = torch.sum((a - b) ** 2, dim=-1)
    # Floor keeps sqrt differentiable at coincident embeddings; the
    # resulting 1e-12 distance bias is below float32 resolution.
    d = torch.sqrt(torch.clamp(d2, min=1e-24))
    lab = torch.as_tensor(label, dtype=a.dtype)
    if lab.ndim == 0:
        lab = lab.expand(d.shape[0])
    if lab.shape[0] != d.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels for {d.shape[0]} pairs")
    pos = torch.clamp(d - m_pos, min=0.0) ** 2
    neg = torch.clamp(m_neg - d, min=0.0) ** 2
    return torch.mean(lab * pos + (1.0 - lab) * neg)


def gram_similarity(xa, xs, gamma: float | None = None) -> torch.Tensor:
    """H[i, k] = dot(anchor_i, style_k) / gamma. Default gamma = sqrt(d)."""
    a = _as_tensor(xa)
    s = _as_tensor(xs)
    if a.ndim != 2 or s.ndim != 2:
        raise ValueError("embedding batches must be 2-D [batch, dim]")
    if a.shape[1] != s.shape[1]:
        raise ValueError(f"embedding dim mismatch: {a.shape[1]} vs {s.shape[1]}")
    if gamma is None:
        gamma = math.sqrt(a.shape[1])
    if gamma <= 0.0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return (a @ s.T) / gamma


def style_class_nll(H, labels, anchor_labels) -> torch.Tensor:
    """Row-softmax of H as logits; per anchor, -log of the total softmax
    mass on style columns of the anchor's class; mean over anchors.

    When each class appears exactly once per style batch this is exactly
    sparse categorical cross-entropy.
    """
    h = _as_tensor(H)
    if h.ndim != 2:
        raise ValueError("similarity matrix must be 2-D [anchors, styles]")
    if not torch.isfinite(h).all():
        raise ValueError("similarity matrix has non-finite entries")
    ys = labels.ys if isinstance(labels, StyleBatchLabels) else tuple(int(y) for y in labels)
    anchor_ys: Sequence[int] = [int(y) for y in anchor_labels]
    if len(ys) != h.shape[1]:
        raise ValueError(f"{len(ys)} style labels for {h.shape[1]} columns")
    if len(anchor_ys) != h.shape[0]:
        raise ValueError(f"{len(anchor_ys)} anchor labels for {h.shape[0]} rows")
    present = set(ys)
    for cls in anchor_ys:
        if cls not in present:
            raise ValueError(f"anchor class {cls} absent from style batch")
    log_p = F.log_softmax(h, dim=1)
    ys_t = torch.tensor(ys)
    losses = []
    for i, cls in enumerate(anchor_ys):
        mask = ys_t == cls
        losses.append(-torch.logsumexp(log_p[i][mask], dim=0))
    return torch.stack(losses).mean()


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _to_nchw(img: torch.Tensor) -> torch.Tensor:
    if img.ndim == 2:
        return img.unsqueeze(0).unsqueeze(0)
    if img.ndim == 3:
        return img.permute(2, 0, 1).unsqueeze(0)
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {tuple(img.shape)}")


def ssim_loss(generated, target, data_range: float = 2.0) -> torch.Tensor:
    """1 - mean local SSIM over 7x7 Gaussian windows (sigma 1.5).

    data_range defaults to 2.0 because images live in [-1, 1].
    """
    gen = _as_tensor(generated)
    tgt = _as_tensor(target)
    if gen.shape != tgt.shape:
        raise ValueError(f"shape mismatch: {tuple(gen.shape)} vs {tuple(tgt.shape)}")
    window = 7
    h, w = gen.shape[0], gen.shape[1]
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than {window}x{window} window")
    x = _to_nchw(gen)
    y = _to_nchw(tgt)
    c = x.shape[1]
    kernel = _gaussian_window(window, 1.5, x.dtype).expand(c, 1, window, window)

    def smooth(t):
        return F.conv2d(t, kernel, groups=c)

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x * mu_x
    var_y = smooth(y * y) - mu_y * mu_y
    cov = smooth(x * y) - mu_x * mu_y
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return 1.0 - ssim_map.mean()


def mix_loss(generated, target, w: float) -> torch.Tensor:
    """w * ssim_loss + (1 - w) * l1_loss."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must be in [0, 1], got {w}")
    if w == 0.0:
        return l1_loss(generated, target)
    if w == 1.0:
        return ssim_loss(generated, target)
    return w * ssim_loss(generated, target) + (1.0 - w) * l1_loss(generated, target)
