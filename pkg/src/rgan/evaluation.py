"""Evaluation utilities: embedding quality, visual grids, gradient and
parameter-count checks.

The cluster metrics are computed directly from pairwise distances so the
numbers are auditable: silhouette uses the standard (b - a) / max(a, b)
per-point score, and accuracy is leave-one-out nearest-centroid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import save_image
from .tensorops import to_nchw


# ---- embeddings ----


def embed_corpus(style_encoder, corpus, batch_size: int = 16):
    """Embed every corpus image with the style encoder in eval mode.

    Returns (embeddings [N, D] float64 ndarray, labels [N] int ndarray).
    """
    was_training = style_encoder.training
    style_encoder.eval()
    chunks = []
    try:
        with torch.no_grad():
            for start in range(0, len(corpus.images), batch_size):
                batch = torch.stack(
                    [torch.as_tensor(im) for im in corpus.images[start : start + batch_size]]
                )
                chunks.append(style_encoder(to_nchw(batch)).double().numpy())
    finally:
        style_encoder.train(was_training)
    embeddings = np.concatenate(chunks, axis=0)
    return embeddings, np.asarray(corpus.labels, dtype=np.int64)


# ---- cluster quality ----


@dataclass
class ClusterReport:
    silhouette: float
    intra_mean: float
    inter_mean: float
    accuracy: float
    n_points: int
    per_class: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def cluster_quality(embeddings, labels, class_names=None) -> ClusterReport:
    """Score a labeled embedding set.

    Every class needs at least two members (the leave-one-out centroid
    and the silhouette a-term are undefined otherwise) and there must be
    at least two classes.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(
            f"embeddings must be [N, D] with one label per row, got {x.shape} "
            f"and {y.shape[0]} labels"
        )
    classes = sorted(set(int(c) for c in y))
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, got {len(classes)}")
    for c in classes:
        if int((y == c).sum()) < 2:
            raise ValueError(f"class {c} has fewer than 2 members")

    n = x.shape[0]
    dist = _pairwise_distances(x)
    same = y[:, None] == y[None, :]
    off_diag = ~np.eye(n, dtype=bool)

    intra_mask = same & off_diag
    inter_mask = ~same
    intra_mean = float(dist[intra_mask].mean())
    inter_mean = float(dist[inter_mask].mean())

    sil = np.zeros(n)
    for i in range(n):
        own = intra_mask[i]
        a = dist[i][own].mean()
        b = min(
            dist[i][y == c].mean() for c in classes if c != y[i]
        )
        denom = max(a, b)
        sil[i] = 0.0 if denom == 0.0 else (b - a) / denom

    sums = {c: x[y == c].sum(axis=0) for c in classes}
    counts = {c: int((y == c).sum()) for c in classes}
    correct = np.zeros(n, dtype=bool)
    for i in range(n):
        best_c, best_d = None, None
        for c in classes:
            if c == y[i]:
                centroid = (sums[c] - x[i]) / (counts[c] - 1)
            else:
                centroid = sums[c] / counts[c]
            d = np.linalg.norm(x[i] - centroid)
            if best_d is None or d < best_d:
                best_c, best_d = c, d
        correct[i] = best_c == y[i]

    per_class = {}
    for c in classes:
        mask = y == c
        name = class_names[c] if class_names is not None else str(c)
        per_class[name] = {
            "size": counts[c],
            "accuracy": float(correct[mask].mean()),
            "silhouette": float(sil[mask].mean()),
        }
    return ClusterReport(
        silhouette=float(sil.mean()),
        intra_mean=intra_mean,
        inter_mean=inter_mean,
        accuracy=float(correct.mean()),
        n_points=n,
        per_class=per_class,
    )


def pair_verification_rate(embeddings_a, embeddings_b, labels, threshold: float) -> float:
    """Fraction of pairs whose distance classifies the pair correctly:
    positives below the threshold, negatives at or above it."""
    a = np.asarray(embeddings_a, dtype=np.float64)
    b = np.asarray(embeddings_b, dtype=np.float64)
    y = np.asarray(labels)
    d = np.linalg.norm(a - b, axis=-1)
    predicted = (d < threshold).astype(np.int64)
    return float((predicted == y).mean())


# ---- visual grid ----


def export_eval_grid(transfer_fn, contents, styles, path) -> torch.Tensor:
    """Write an (N+1) x (M+1) tile grid: row 0 holds the styles, column 0
    the contents, and cell (i, j) is transfer_fn(content_i, style_j). The
    top-left tile is neutral gray. Returns the grid tensor and writes a
    PNG; identical inputs produce byte-identical files.
    """
    if not contents or not styles:
        raise ValueError("need at least one content and one style image")
    tiles = [t.shape for t in list(contents) + list(styles)]
    if len(set(tiles)) != 1:
        raise ValueError(f"all tiles must share one shape, got {sorted(set(tiles))}")
    h, w, c = contents[0].shape
    n, m = len(contents), len(styles)
    grid = torch.zeros(((n + 1) * h, (m + 1) * w, c))
    for j, style in enumerate(styles):
        grid[0:h, (j + 1) * w : (j + 2) * w] = torch.as_tensor(style)
    for i, content in enumerate(contents):
        grid[(i + 1) * h : (i + 2) * h, 0:w] = torch.as_tensor(content)
        for j, style in enumerate(styles):
            out = torch.as_tensor(transfer_fn(content, style))
            if out.shape != (h, w, c):
                raise ValueError(
                    f"transfer output for cell ({i}, {j}) has shape "
                    f"{tuple(out.shape)}, expected {(h, w, c)}"
                )
            grid[(i + 1) * h : (i + 2) * h, (j + 1) * w : (j + 2) * w] = out
    save_image(grid, path)
    return grid


# ---- gradient and parameter checks ----


def finite_diff_gradcheck(fn, x, step: float = 1e-3) -> float:
    """Compare autograd against central differences, elementwise.

    fn maps a tensor to a scalar. Returns the max over elements of
    |numeric - analytic| normalized by the largest analytic magnitude
    (floored at 1e-6). Inputs should avoid non-differentiable points;
    the caller controls sampling.
    """
    base = torch.as_tensor(x).detach().to(torch.float64)
    probe = base.clone().requires_grad_(True)
    out = fn(probe)
    if out.dim() != 0:
        raise ValueError(f"fn must return a scalar, got shape {tuple(out.shape)}")
    out.backward()
    analytic = probe.grad.detach().clone()

    numeric = torch.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        plus = float(fn(base.reshape(base.shape)))
        flat[i] = orig - step
        minus = float(fn(base.reshape(base.shape)))
        flat[i] = orig
        num_flat[i] = (plus - minus) / (2.0 * step)

    scale = max(float(analytic.abs().max()), 1e-6)
    return float((numeric - analytic).abs().max() / scale)


@dataclass
class ParamComparison:
    a1_total: int
    a2_total: int
    a1_breakdown: dict
    a2_breakdown: dict

    @property
    def a2_smaller(self) -> bool:
        return self.a2_total < self.a1_total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["a2_smaller"] = self.a2_smaller
        return d


def _count(model) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def compare_param_counts(a1_models: dict, a2_models: dict) -> ParamComparison:
    """Trainable-parameter totals with per-submodel breakdowns."""
    a1_breakdown = {name: _count(m) for name, m in a1_models.items()}
    a2_breakdown = {name: _count(m) for name, m in a2_models.items()}
    return ParamComparison(
        a1_total=sum(a1_breakdown.values()),
        a2_total=sum(a2_breakdown.values()),
        a1_breakdown=a1_breakdown,
        a2_breakdown=a2_breakdown,
    )


# ---- projection export ----


def export_pca_scatter(embeddings, labels, path) -> np.ndarray:
    """Project embeddings to their top-2 principal components and write
    x,y,label CSV rows. The component sign convention (largest loading
    positive) makes re-exports byte-identical."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = list(labels)
    if x.ndim != 2 or x.shape[0] != len(y):
        raise ValueError(
            f"embeddings must be [N, D] with one label per row, got {x.shape} "
            f"and {len(y)} labels"
        )
    if x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("need at least 2 points and 2 dimensions")
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    for k in range(2):
        pivot = np.argmax(np.abs(components[k]))
        if components[k][pivot] < 0:
            components[k] = -components[k]
    coords = centered @ components.T

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x,y,label"]
    for (px, py), label in zip(coords, y):
        lines.append(f"{px:.6f},{py:.6f},{label}")
    out.write_text("\n".join(lines) + "\n")
    return coords
