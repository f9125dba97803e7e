"""Corpus ingestion, paired-dataset synthesis, and samplers.

Images are (H, W, 3) float32 torch tensors in [-1, 1] everywhere. The
image matrix crosses content rows with style columns; cell (i, j) holds
content i re-rendered in style j, which makes (content, style, target)
triplets for the paired approach. Procedural texture generators provide
labeled style corpora at desk scale without any external dataset.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .tensorops import to_float_tensor
from .wavelet import LevelBands, SubbandPyramid, haar_dwt2, haar_idwt2

MATRIX_MANIFEST_VERSION = 1
CORPUS_MANIFEST_VERSION = 1


# ---- loading and saving ----


def load_and_preprocess(path, size: tuple[int, int]) -> torch.Tensor:
    """Decode PNG/JPEG, bilinear-resize to (H, W), map to [-1, 1]."""
    h, w = int(size[0]), int(size[1])
    with Image.open(path) as im:
        im = im.convert("RGB").resize((w, h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr)


def save_image(image, path) -> None:
    """Write an (H, W, 3) tensor in [-1, 1] as an 8-bit PNG."""
    arr = to_float_tensor(image).clamp(-1.0, 1.0).numpy()
    quantized = np.round((arr + 1.0) * 127.5).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory does not exist: {d}")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise ValueError(f"no PNG/JPEG images in {d}")
    return paths


# ---- image matrix ----


@dataclass
class ImageMatrix:
    """Dense N x M grid: rows are contents, columns are styles."""

    contents: list
    styles: list
    cells: list  # cells[i][j]

    def __post_init__(self):
        n, m = len(self.contents), len(self.styles)
        if n == 0 or m == 0:
            raise ValueError("image matrix needs at least one content and one style")
        if len(self.cells) != n or any(len(row) != m for row in self.cells):
            raise ValueError(f"cells must be dense {n}x{m}")
        shape = tuple(to_float_tensor(self.contents[0]).shape)
        for group in (self.contents, self.styles, *self.cells):
            for img in group:
                if tuple(to_float_tensor(img).shape) != shape:
                    raise ValueError("all matrix images must share one shape")

    @property
    def n(self) -> int:
        return len(self.contents)

    @property
    def m(self) -> int:
        return len(self.styles)


def synthesize_image_matrix(contents, styles, stylizer) -> ImageMatrix:
    """cells[i][j] = stylizer(contents[i], styles[j]) for every pair."""
    if not contents or not styles:
        raise ValueError("contents and styles must be non-empty")
    cells = []
    for i, content in enumerate(contents):
        row = []
        for j, style in enumerate(styles):
            try:
                row.append(stylizer(content, style))
            except Exception as exc:
                raise RuntimeError(f"stylizer failed at cell ({i}, {j})") from exc
        cells.append(row)
    return ImageMatrix(contents=list(contents), styles=list(styles), cells=cells)


def procedural_stylizer(content, style, seed: int = 0) -> torch.Tensor:
    """Deterministic desk-scale stand-in for a pretrained style-transfer
    model: keeps the content's coarse structure, shifts channel means to
    the style's, and injects the style's finest Haar detail at 0.3 gain.

    The seed parameter is part of the pluggable-stylizer interface; this
    particular stylizer is seed-independent.
    """
    del seed
    c = to_float_tensor(content)
    s = to_float_tensor(style)
    if c.shape != s.shape:
        raise ValueError(f"shape mismatch: {tuple(c.shape)} vs {tuple(s.shape)}")
    gain = 0.3
    pc = haar_dwt2(c, 2)
    ps = haar_dwt2(s, 2)
    # A constant added to the deepest LL band moves every pixel by a
    # quarter of it (two synthesis halvings), so 4x the mean difference
    # lands the output's channel means on the style's.
    shift = (s.mean(dim=(0, 1)) - c.mean(dim=(0, 1))) * 4.0
    level2 = LevelBands(
        ll=pc.bands[1].ll + shift,
        lh=pc.bands[1].lh,
        hl=pc.bands[1].hl,
        hh=pc.bands[1].hh,
    )
    level1 = LevelBands(
        ll=pc.bands[0].ll,  # placeholder; reconstruction reads level-2 LL
        lh=(1 - gain) * pc.bands[0].lh + gain * ps.bands[0].lh,
        hl=(1 - gain) * pc.bands[0].hl + gain * ps.bands[0].hl,
        hh=(1 - gain) * pc.bands[0].hh + gain * ps.bands[0].hh,
    )
    out = haar_idwt2(SubbandPyramid(base_shape=pc.base_shape, bands=[level1, level2]))
    return out.clamp(-1.0, 1.0)


@dataclass
class TripletSample:
    content: torch.Tensor
    style: torch.Tensor
    target: torch.Tensor
    content_index: int = -1
    style_index: int = -1


def make_triplets(matrix: ImageMatrix, rng: np.random.Generator):
    """One epoch: every (i, j) cell exactly once, in rng-shuffled order."""
    for k in rng.permutation(matrix.n * matrix.m):
        i, j = divmod(int(k), matrix.m)
        yield TripletSample(
            content=matrix.contents[i],
            style=matrix.styles[j],
            target=matrix.cells[i][j],
            content_index=i,
            style_index=j,
        )


# ---- pair and style-batch samplers ----


def augment_view(image, rng: np.random.Generator) -> torch.Tensor:
    """Random horizontal flip plus random crop (80-100%) resized back."""
    img = to_float_tensor(image)
    if rng.random() < 0.5:
        img = torch.flip(img, dims=(1,))
    h, w = img.shape[0], img.shape[1]
    scale = rng.uniform(0.8, 1.0)
    ch = max(1, round(h * scale))
    cw = max(1, round(w * scale))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[top : top + ch, left : left + cw]
    nchw = crop.permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(nchw, size=(h, w), mode="bilinear", align_corners=False)
    return resized.squeeze(0).permute(1, 2, 0)


@dataclass
class PairBatch:
    """Anchor/partner image pairs with same-source labels."""

    anchors: torch.Tensor
    partners: torch.Tensor
    labels: torch.Tensor
    anchor_ids: list[int] = field(default_factory=list)
    partner_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        n = self.anchors.shape[0]
        if self.partners.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("anchors, partners, labels must have equal length")
        if self.anchor_ids and self.partner_ids:
            for lab, a, b in zip(self.labels.tolist(), self.anchor_ids, self.partner_ids):
                if (a == b) != bool(lab):
                    raise ValueError("labels inconsistent with source identity")


def sample_content_pairs(contents, batch_size: int, rng: np.random.Generator) -> PairBatch:
    """Each slot is positive with probability 0.5: the anchor paired with
    an augmented view of itself; negatives pair it with a distinct image."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(contents) < 2:
        raise ValueError("need at least 2 content images for negative pairs")
    anchors, partners, labels, aids, pids = [], [], [], [], []
    for _ in range(batch_size):
        i = int(rng.integers(len(contents)))
        positive = rng.random() < 0.5
        if positive:
            j = i
        else:
            j = int(rng.integers(len(contents) - 1))
            if j >= i:
                j += 1
        anchors.append(to_float_tensor(contents[i]))
        partners.append(augment_view(contents[j], rng))
        labels.append(1 if positive else 0)
        aids.append(i)
        pids.append(j)
    return PairBatch(
        anchors=torch.stack(anchors),
        partners=torch.stack(partners),
        labels=torch.tensor(labels),
        anchor_ids=aids,
        partner_ids=pids,
    )


@dataclass
class StyleCorpus:
    images: list
    labels: list[int]
    class_names: list[str]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have equal length")
        bad = [y for y in self.labels if not 0 <= y < len(self.class_names)]
        if bad:
            raise ValueError(f"labels outside [0, {len(self.class_names)}): {sorted(set(bad))}")


@dataclass
class StyleBatch:
    anchors: torch.Tensor
    anchor_labels: list[int]
    styles: torch.Tensor
    style_labels: list[int]


def sample_style_batch(
    corpus: StyleCorpus,
    anchors_per_batch: int,
    styles_per_batch: int,
    rng: np.random.Generator,
    retries: int = 50,
) -> StyleBatch:
    """Uniform draws with a coverage guarantee: every anchor's class
    appears among the style samples. Anchors whose class is missing are
    resampled; if that keeps failing, the anchor's own augmented view is
    appended to the style side instead."""
    if anchors_per_batch < 1 or styles_per_batch < 1:
        raise ValueError("anchors_per_batch and styles_per_batch must be >= 1")
    if not corpus.images:
        raise ValueError("empty corpus")
    style_imgs = []
    style_labels = []
    for _ in range(styles_per_batch):
        k = int(rng.integers(len(corpus.images)))
        style_imgs.append(to_float_tensor(corpus.images[k]))
        style_labels.append(int(corpus.labels[k]))
    present = set(style_labels)
    anchors = []
    anchor_labels = []
    for _ in range(anchors_per_batch):
        k = int(rng.integers(len(corpus.images)))
        for _ in range(retries):
            if corpus.labels[k] in present:
                break
            k = int(rng.integers(len(corpus.images)))
        label = int(corpus.labels[k])
        if label not in present:
            style_imgs.append(augment_view(corpus.images[k], rng))
            style_labels.append(label)
            present.add(label)
        anchors.append(to_float_tensor(corpus.images[k]))
        anchor_labels.append(label)
    return StyleBatch(
        anchors=torch.stack(anchors),
        anchor_labels=anchor_labels,
        styles=torch.stack(style_imgs),
        style_labels=style_labels,
    )


# ---- procedural fixtures ----


def _two_colors(rng: np.random.Generator):
    base = rng.uniform(-0.9, 0.9, size=3)
    delta = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
    other = np.clip(base + delta, -1.0, 1.0)
    return base.astype(np.float32), other.astype(np.float32)


def _gen_stripes(h: int, w: int, rng: np.random.Generator) -> torch.Tensor:
    c1, c2 = _two_colors(rng)
    # Odd widths put stripe boundaries on both row parities, so level-1
    # Haar detail energy is always present along exactly one orientation.
    width = int(rng.choice([3, 5, 7]))
    phase = int(rng.integers(0, width))
    rows = ((np.arange(h) + phase) // width) % 2
    arr = np.empty((h, w, 3), dtype=np.float32)
    arr[:] = np.where(rows[:, None, None] == 0, c1, c2)
    return torch.from_numpy(arr)


def _gen_checker(h: int, w: int, rng: np.random.Generator) -> torch.Tensor:
    c1, c2 = _two_colors(rng)
    cell = int(rng.choice([4, 8]))
    py, px = int(rng.integers(0, cell)), int(rng.integers(0, cell))
    yy = (np.arange(h) + py) // cell
    xx = (np.arange(w) + px) // cell
    board = (yy[:, None] + xx[None, :]) % 2
    arr = np.where(board[:, :, None] == 0, c1, c2)
    return torch.from_numpy(arr.astype(np.float32))


def _gen_dots(h: int, w: int, rng: np.random.Generator) -> torch.Tensor:
    c1, c2 = _two_colors(rng)
    arr = np.broadcast_to(c1, (h, w, 3)).copy()
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(6, 15))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2.0, max(3.0, h / 8))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        arr[mask] = c2
    return torch.from_numpy(arr.astype(np.float32))


def _gen_perlin(h: int, w: int, rng: np.random.Generator) -> torch.Tensor:
    total = torch.zeros(1, 3, h, w)
    amp = 1.0
    for grid in (4, 8, 16):
        coarse = torch.from_numpy(rng.normal(size=(1, 3, grid, grid)).astype(np.float32))
        total += amp * F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
        amp *= 0.5
    flat = total.squeeze(0).permute(1, 2, 0)
    lo, hi = float(flat.min()), float(flat.max())
    return (flat - lo) / max(hi - lo, 1e-6) * 2.0 - 1.0


TEXTURE_GENERATORS = {
    "stripes": _gen_stripes,
    "checker": _gen_checker,
    "dots": _gen_dots,
    "perlin-noise": _gen_perlin,
}


def procedural_texture_corpus(classes, n_per_class: int, size, seed: int) -> StyleCorpus:
    """Labeled synthetic texture corpus, deterministic per seed."""
    unknown = [c for c in classes if c not in TEXTURE_GENERATORS]
    if unknown:
        raise ValueError(
            f"unknown texture generator(s) {unknown}; "
            f"known: {sorted(TEXTURE_GENERATORS)}"
        )
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    h, w = (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, name in enumerate(classes):
        for _ in range(n_per_class):
            images.append(TEXTURE_GENERATORS[name](h, w, rng))
            labels.append(label)
    return StyleCorpus(images=images, labels=labels, class_names=list(classes))


def procedural_content_images(n: int, size, seed: int) -> list[torch.Tensor]:
    """Smooth gradient scenes with a few solid shapes; content fixtures."""
    h, w = (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))
    rng = np.random.default_rng(seed)
    images = []
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n):
        c1, c2 = _two_colors(rng)
        angle = rng.uniform(0, 2 * np.pi)
        t = (np.cos(angle) * xx / w + np.sin(angle) * yy / h + 1.0) / 2.0
        arr = c1 + (c2 - c1) * t[:, :, None].astype(np.float32)
        for _ in range(int(rng.integers(2, 5))):
            color = rng.uniform(-1.0, 1.0, size=3).astype(np.float32)
            if rng.random() < 0.5:
                y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
                dy, dx = rng.integers(h // 8, h // 2), rng.integers(w // 8, w // 2)
                arr[y0 : y0 + dy, x0 : x0 + dx] = color
            else:
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                r = rng.uniform(h / 10, h / 4)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
                arr[mask] = color
        images.append(torch.from_numpy(np.clip(arr, -1.0, 1.0).astype(np.float32)))
    return images


# ---- on-disk stores ----


def save_image_matrix(matrix: ImageMatrix, out_dir) -> dict:
    """Matrix store: cell_{i}_{j}.png at the root plus contents/ and
    styles/ subdirectories, all indexed by matrix.json with checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shape = tuple(to_float_tensor(matrix.contents[0]).shape)
    manifest = {
        "version": MATRIX_MANIFEST_VERSION,
        "rows": matrix.n,
        "cols": matrix.m,
        "size": [shape[0], shape[1]],
        "contents": [],
        "styles": [],
        "cells": [],
    }

    def _store(image, rel: str, bucket: list, **extra):
        path = out / rel
        save_image(image, path)
        bucket.append({"path": rel, "sha256": _sha256(path), **extra})

    for i, img in enumerate(matrix.contents):
        _store(img, f"contents/content_{i}.png", manifest["contents"])
    for j, img in enumerate(matrix.styles):
        _store(img, f"styles/style_{j}.png", manifest["styles"])
    for i in range(matrix.n):
        for j in range(matrix.m):
            _store(matrix.cells[i][j], f"cell_{i}_{j}.png", manifest["cells"], row=i, col=j)
    (out / "matrix.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _verified_load(root: Path, entry: dict, size) -> torch.Tensor:
    path = root / entry["path"]
    digest = _sha256(path)
    if digest != entry["sha256"]:
        raise ValueError(f"checksum mismatch for {path}")
    return load_and_preprocess(path, size)


def load_image_matrix(store_dir) -> ImageMatrix:
    root = Path(store_dir)
    manifest_path = root / "matrix.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no matrix.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MATRIX_MANIFEST_VERSION:
        raise ValueError(
            f"matrix store version {manifest.get('version')} unsupported "
            f"(expected {MATRIX_MANIFEST_VERSION})"
        )
    size = manifest["size"]
    contents = [_verified_load(root, e, size) for e in manifest["contents"]]
    styles = [_verified_load(root, e, size) for e in manifest["styles"]]
    cells = [[None] * manifest["cols"] for _ in range(manifest["rows"])]
    for entry in manifest["cells"]:
        cells[entry["row"]][entry["col"]] = _verified_load(root, entry, size)
    if any(cell is None for row in cells for cell in row):
        raise ValueError("matrix store is missing cells")
    return ImageMatrix(contents=contents, styles=styles, cells=cells)


def save_style_corpus(corpus: StyleCorpus, out_dir) -> dict:
    """Directory-per-class PNG tree plus manifest.json with checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shape = tuple(to_float_tensor(corpus.images[0]).shape)
    files = []
    counters = [0] * len(corpus.class_names)
    for img, label in zip(corpus.images, corpus.labels):
        name = corpus.class_names[label]
        rel = f"{name}/img_{counters[label]}.png"
        counters[label] += 1
        path = out / rel
        save_image(img, path)
        files.append({"path": rel, "label": label, "sha256": _sha256(path)})
    manifest = {
        "version": CORPUS_MANIFEST_VERSION,
        "classes": list(corpus.class_names),
        "size": [shape[0], shape[1]],
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_style_corpus(corpus_dir) -> StyleCorpus:
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CORPUS_MANIFEST_VERSION:
        raise ValueError(
            f"corpus version {manifest.get('version')} unsupported "
            f"(expected {CORPUS_MANIFEST_VERSION})"
        )
    size = manifest["size"]
    images, labels = [], []
    for entry in manifest["files"]:
        images.append(_verified_load(root, entry, size))
        labels.append(int(entry["label"]))
    return StyleCorpus(images=images, labels=labels, class_names=list(manifest["classes"]))
