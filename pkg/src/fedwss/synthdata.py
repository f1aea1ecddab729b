"""Deterministic multi-site synthetic dataset generation.

Two tasks stand in for the medical corpora: NESTED draws two nested ellipses
(an outer disc-like region containing an inner cup-like one, classes 1 and
2) and BLOB draws a single star-convex region (class 1). Per-site domain
shift comes from intensity gain/bias, blur, additive noise, and a sinusoidal
texture. Images are quantized to the 1/255 grid at generation time so the
PGM dump format round-trips exactly.

Sparse annotations: POINT, two scribble styles, BLOCK (all guaranteed
consistent with the dense mask), and BBOX, which stores tight boxes and is
converted to a noisy pixel labeling by ``convert_bbox``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .losses import UNLABELED, SparseLabelMap
from .pgm import read_pgm, write_pgm


class Task(Enum):
    NESTED = "nested"
    BLOB = "blob"


class Annotation(Enum):
    POINT = "point"
    SCRIBBLE1 = "scribble1"
    SCRIBBLE2 = "scribble2"
    BBOX = "bbox"
    BLOCK = "block"


@dataclass
class DomainShift:
    gain: float = 1.0
    bias: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.04
    texture_freq: float = 0.0
    texture_amp: float = 0.0


# default per-site shift schedule, cycled by site index
_SHIFTS = [
    DomainShift(1.00, 0.00, 0.0, 0.04, 0.0, 0.00),
    DomainShift(0.85, 0.06, 0.8, 0.08, 3.0, 0.06),
    DomainShift(1.12, -0.05, 0.4, 0.05, 6.0, 0.05),
    DomainShift(0.95, 0.03, 1.2, 0.10, 2.0, 0.08),
    DomainShift(1.05, -0.02, 0.6, 0.06, 4.0, 0.04),
]


def default_shift(site: int) -> DomainShift:
    return _SHIFTS[site % len(_SHIFTS)]


@dataclass
class SiteSpec:
    site: int
    n_train: int
    n_test: int
    task: Task = Task.NESTED
    image_size: int = 48
    annotation: Annotation = Annotation.SCRIBBLE1
    shift: DomainShift = field(default_factory=lambda: DomainShift())
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 16:
            raise ValueError(f"image size {self.image_size} not divisible by 16")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")

    @property
    def num_classes(self) -> int:
        return 3 if self.task is Task.NESTED else 2


@dataclass
class BoxAnnotation:
    """Per-class tight bounding boxes: class -> (r0, c0, r1, c1), inclusive."""
    boxes: dict[int, tuple[int, int, int, int]]
    shape: tuple[int, int]


@dataclass
class Sample:
    image: np.ndarray                  # [1,H,W] in [0,1], on the 1/255 grid
    full_mask: np.ndarray              # [H,W] class ids (evaluation only)
    sparse_label: SparseLabelMap | None
    meta: dict


def _ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float,
                  angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / rx
    v = (-sa * dx + ca * dy) / ry
    return u * u + v * v <= 1.0


def _nested_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Outer ellipse (class 1) with a fully contained inner ellipse (class 2).

    Mild eccentricity and rotation keep tight bounding boxes faithful to the
    region outline (the box-derived annotation style depends on that)."""
    h = w = size
    for _ in range(100):
        cy = h / 2 + rng.uniform(-0.08, 0.08) * h
        cx = w / 2 + rng.uniform(-0.08, 0.08) * w
        ry = rng.uniform(0.18, 0.30) * h
        rx = float(np.clip(ry * rng.uniform(0.8, 1.25), 0.16 * w, 0.31 * w))
        ang = rng.uniform(-0.3, 0.3)
        outer = _ellipse_mask(h, w, cy, cx, ry, rx, ang)
        frac = rng.uniform(0.38, 0.58)
        icy = cy + rng.uniform(-0.15, 0.15) * ry
        icx = cx + rng.uniform(-0.15, 0.15) * rx
        inner = _ellipse_mask(h, w, icy, icx, frac * ry, frac * rx, ang)
        if inner.any() and not (inner & ~outer).any():
            mask = np.zeros((h, w), dtype=np.uint8)
            mask[outer] = 1
            mask[inner] = 2
            return mask
    raise RuntimeError("could not draw a contained inner ellipse in 100 tries")


def _blob_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Star-convex region: a base radius modulated by low-order harmonics."""
    h = w = size
    cy = h / 2 + rng.uniform(-0.08, 0.08) * h
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    r0 = rng.uniform(0.16, 0.28) * size
    n_harm = 3
    amps = rng.uniform(0.0, 0.18, size=n_harm) * r0
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    yy, xx = np.mgrid[0:h, 0:w]
    theta = np.arctan2(yy - cy, xx - cx)
    radius = np.hypot(yy - cy, xx - cx)
    rmax = r0 * np.ones((h, w))
    for k in range(n_harm):
        rmax = rmax + amps[k] * np.sin((k + 2) * theta + phases[k])
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[radius <= rmax] = 1
    return mask


_NESTED_LEVELS = {0: 0.25, 1: 0.55, 2: 0.85}
_BLOB_LEVELS = {0: 0.30, 1: 0.80}


def _render_image(mask: np.ndarray, task: Task, shift: DomainShift,
                  rng: np.random.Generator) -> np.ndarray:
    levels = _NESTED_LEVELS if task is Task.NESTED else _BLOB_LEVELS
    img = np.zeros(mask.shape)
    for cls, level in levels.items():
        img[mask == cls] = level
    if shift.texture_amp > 0:
        h, w = mask.shape
        yy, xx = np.mgrid[0:h, 0:w]
        phase = rng.uniform(0, 2 * np.pi, size=2)
        img = img + shift.texture_amp * np.sin(
            2 * np.pi * shift.texture_freq * xx / w + phase[0]) * np.sin(
            2 * np.pi * shift.texture_freq * yy / h + phase[1])
    img = img * shift.gain + shift.bias
    if shift.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, shift.blur_sigma)
    img = img + rng.normal(0.0, shift.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # land exactly on the 8-bit grid so PGM dump/load is lossless
    return np.rint(img * 255.0) / 255.0


def _interior_point(region: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    eroded = ndimage.binary_erosion(region)
    pool = np.argwhere(eroded if eroded.any() else region)
    return tuple(pool[rng.integers(len(pool))])


def _point_labels(labels: np.ndarray, region: np.ndarray, cls: int,
                  rng: np.random.Generator) -> None:
    r, c = _interior_point(region, rng)
    labels[r, c] = cls


def _skeleton_labels(labels: np.ndarray, region: np.ndarray, cls: int,
                     rng: np.random.Generator) -> bool:
    skel = skeletonize(region)
    if not skel.any():
        return False
    labels[skel] = cls
    return True


def _walk_labels(labels: np.ndarray, region: np.ndarray, cls: int,
                 rng: np.random.Generator) -> bool:
    area = int(region.sum())
    if area < 4:
        return False
    pos = _interior_point(region, rng)
    steps = max(12, int(2.5 * np.sqrt(area)))
    h, w = region.shape
    path = [pos]
    for _ in range(steps):
        dirs = rng.permutation(4)
        moved = False
        for d in dirs:
            dr, dc = ((-1, 0), (1, 0), (0, -1), (0, 1))[d]
            nr, nc = pos[0] + dr, pos[1] + dc
            if 0 <= nr < h and 0 <= nc < w and region[nr, nc]:
                pos = (nr, nc)
                path.append(pos)
                moved = True
                break
        if not moved:
            break
    for r, c in path:
        labels[r, c] = cls
    return True


def _block_labels(labels: np.ndarray, region: np.ndarray, cls: int,
                  rng: np.random.Generator) -> bool:
    dt = ndimage.distance_transform_edt(region)
    best = float(dt.max())
    if best < 2.0:
        return False
    pool = np.argwhere(dt >= max(2.0, 0.7 * best))
    r, c = pool[rng.integers(len(pool))]
    half = max(1, int(dt[r, c] / np.sqrt(2.0)) - 1)
    while half >= 1:
        r0, r1 = r - half, r + half + 1
        c0, c1 = c - half, c + half + 1
        if r0 >= 0 and c0 >= 0 and r1 <= region.shape[0] and c1 <= region.shape[1] \
                and region[r0:r1, c0:c1].all():
            labels[r0:r1, c0:c1] = cls
            return True
        half -= 1
    return False


def tight_bboxes(full_mask: np.ndarray, num_classes: int) -> BoxAnnotation:
    """Tight per-class bounding boxes (inclusive corner coordinates).

    For the nested task the outer class box spans the whole outer region
    (its pixels surround the inner class)."""
    boxes = {}
    for cls in range(1, num_classes):
        region = full_mask == cls
        if cls == 1 and num_classes > 2:
            region = region | (full_mask > 1)
        if not region.any():
            continue
        rows, cols = np.nonzero(region)
        boxes[cls] = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
    return BoxAnnotation(boxes, full_mask.shape)


def sparse_annotate(full_mask: np.ndarray, kind: Annotation, seed: int,
                    num_classes: int) -> SparseLabelMap | BoxAnnotation:
    """Simulate one sparse annotation of a dense mask.

    Pixel-wise styles return a SparseLabelMap whose foreground labels agree
    with the dense mask by construction; a class region too small for the
    requested style falls back to POINT for that class (recorded in the
    map's fallback list via the returned object's companion metadata).
    BBOX returns box coordinates instead.
    """
    if kind is Annotation.BBOX:
        return tight_bboxes(full_mask, num_classes)
    rng = np.random.default_rng(seed)
    labels = np.full(full_mask.shape, UNLABELED, dtype=np.int64)
    fallbacks: list[int] = []
    background = full_mask == 0
    bg_core = ndimage.binary_erosion(background, iterations=2)
    regions = [(cls, full_mask == cls) for cls in range(1, num_classes)]
    regions.append((0, bg_core if bg_core.any() else background))
    for cls, region in regions:
        if not region.any():
            continue
        if kind is Annotation.POINT:
            _point_labels(labels, region, cls, rng)
            continue
        drawer = {Annotation.SCRIBBLE1: _skeleton_labels,
                  Annotation.SCRIBBLE2: _walk_labels,
                  Annotation.BLOCK: _block_labels}[kind]
        if not drawer(labels, region, cls, rng):
            _point_labels(labels, region, cls, rng)
            fallbacks.append(cls)
    out = SparseLabelMap(labels, num_classes)
    out.fallbacks = fallbacks
    return out


def convert_bbox(annotation: BoxAnnotation, task: Task,
                 num_classes: int) -> SparseLabelMap:
    """Turn tight boxes into a trainable sparse labeling.

    NESTED: each class gets the one-pixel boundary ring of the ellipse
    inscribed in its box (a noisy stand-in for the region outline). BLOB:
    the box shrunk by 40 percent per side (floor) becomes a foreground
    block. Pixels outside every box, eroded by a 2 px margin, are labeled
    background. Box-derived labels may disagree with the dense mask.
    """
    h, w = annotation.shape
    labels = np.full((h, w), UNLABELED, dtype=np.int64)
    inside_any = np.zeros((h, w), dtype=bool)
    for cls, (r0, c0, r1, c1) in annotation.boxes.items():
        if r1 < r0 or c1 < c0:
            raise ValueError(f"degenerate box for class {cls}: {(r0, c0, r1, c1)}")
        inside_any[r0:r1 + 1, c0:c1 + 1] = True
    for cls in sorted(annotation.boxes):
        r0, c0, r1, c1 = annotation.boxes[cls]
        bh, bw = r1 - r0 + 1, c1 - c0 + 1
        if bh * bw == 0:
            raise ValueError(f"zero-area box for class {cls}")
        if task is Task.NESTED:
            filled = _ellipse_mask(h, w, (r0 + r1) / 2.0, (c0 + c1) / 2.0,
                                   bh / 2.0, bw / 2.0, 0.0)
            ring = filled & ~ndimage.binary_erosion(filled)
            labels[ring] = cls
        else:
            dr, dc = int(0.4 * bh), int(0.4 * bw)
            labels[r0 + dr:r1 + 1 - dr, c0 + dc:c1 + 1 - dc] = cls
    outside = ~inside_any
    eroded = ndimage.binary_erosion(outside, iterations=2)
    labels[eroded] = 0
    return SparseLabelMap(labels, num_classes)


def generate_site(spec: SiteSpec) -> list[Sample]:
    """All samples for one site (train split first, then test).

    Regeneration from the same spec is byte-identical: each sample draws
    from its own stream keyed by (spec.seed, sample index).
    """
    samples = []
    total = spec.n_train + spec.n_test
    for idx in range(total):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(idx,)))
        mask = (_nested_mask if spec.task is Task.NESTED else _blob_mask)(
            spec.image_size, rng)
        image = _render_image(mask, spec.task, spec.shift, rng)[None]
        meta = {"site": spec.site, "index": idx, "annotation": spec.annotation.value,
                "split": "train" if idx < spec.n_train else "test"}
        sparse = None
        if idx < spec.n_train:
            ann_seed = int(rng.integers(0, 2 ** 63 - 1))
            ann = sparse_annotate(mask, spec.annotation, ann_seed, spec.num_classes)
            if isinstance(ann, BoxAnnotation):
                meta["boxes"] = {str(k): list(v) for k, v in ann.boxes.items()}
                sparse = convert_bbox(ann, spec.task, spec.num_classes)
            else:
                sparse = ann
                if getattr(ann, "fallbacks", None):
                    meta["point_fallback_classes"] = list(ann.fallbacks)
        samples.append(Sample(image, mask, sparse, meta))
    return samples


def augment(image: np.ndarray, labels: np.ndarray,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Training-time flips and a rotation drawn from [-45, 45] degrees,
    applied identically to the image and the sparse label map."""
    img = image
    lab = labels
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
        lab = lab[:, ::-1]
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
        lab = lab[::-1, :]
    angle = float(rng.uniform(-45.0, 45.0))
    img = ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1,
                         mode="nearest")
    lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="constant",
                         cval=UNLABELED)
    return np.clip(img, 0.0, 1.0), lab


# ---------------------------------------------------------------------------
# on-disk layout: one directory per site, PGM rasters plus a JSONL manifest


def dump_site(directory: str | Path, spec: SiteSpec, samples: list[Sample]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        stem = f"{s.meta['split']}_{i:04d}"
        write_pgm(directory / f"{stem}_img.pgm", s.image[0])
        write_pgm(directory / f"{stem}_mask.pgm", s.full_mask.astype(np.uint8))
        entry = dict(s.meta)
        entry.update(stem=stem, seed=spec.seed)
        if s.sparse_label is not None:
            write_pgm(directory / f"{stem}_sparse.pgm",
                      s.sparse_label.labels.astype(np.uint8))
            entry["num_classes"] = s.sparse_label.num_classes
        lines.append(json.dumps(entry, sort_keys=True))
    (directory / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def load_site(directory: str | Path) -> list[Sample]:
    directory = Path(directory)
    samples = []
    for line in (directory / "manifest.jsonl").read_text().splitlines():
        entry = json.loads(line)
        stem = entry["stem"]
        image = (read_pgm(directory / f"{stem}_img.pgm") / 255.0)[None]
        mask = read_pgm(directory / f"{stem}_mask.pgm")
        sparse = None
        if (directory / f"{stem}_sparse.pgm").exists():
            sparse = SparseLabelMap(
                read_pgm(directory / f"{stem}_sparse.pgm").astype(np.int64),
                entry["num_classes"])
        samples.append(Sample(image, mask, sparse, entry))
    return samples
