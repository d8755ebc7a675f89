"""Dataset ingestion, stratified splitting, class weights, augmentation,
image loading, and the synthetic desk-scale corpus.

The on-disk layout mirrors the public chest X-ray corpus: train/ and test/
directories each holding NORMAL/ and PNEUMONIA/ folders, with the pneumonia
subtype encoded in the filename ("bacteria" vs "virus"). Images are 8-bit
PNG, grayscale or RGB; the original corpus ships as JPEG and must be
converted once with any standard image tool before ingestion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .fsio import atomic_write_text
from .resample import bilinear_resize


class DatasetError(Exception):
    """Unusable dataset layout, file, or request."""


class ClassLabel(IntEnum):
    NORMAL = 0
    BACTERIAL = 1
    VIRAL = 2


CLASS_NAMES = ("normal", "bacterial", "viral")
NUM_CLASSES = 3


@dataclass(frozen=True)
class DatasetRecord:
    path: Path
    label: ClassLabel
    split: str  # train | val | test
    box: tuple[int, int, int, int] | None = None  # (row0, col0, row1, col1), half-open


class DatasetIndex:
    """Immutable record list plus per-class bookkeeping and sidecar I/O."""

    def __init__(self, records: list[DatasetRecord], root: Path):
        self.records = list(records)
        self.root = Path(root)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, split: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == split]

    def counts(self, split: str | None = None) -> np.ndarray:
        out = np.zeros(NUM_CLASSES, dtype=np.int64)
        for r in self.records:
            if split is None or r.split == split:
                out[int(r.label)] += 1
        return out

    def save(self, path):
        lines = []
        for r in self.records:
            rel = Path(r.path).relative_to(self.root)
            box = ",".join(map(str, r.box)) if r.box is not None else "-"
            lines.append(f"{rel.as_posix()}\t{r.label.name}\t{r.split}\t{box}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, root=None) -> "DatasetIndex":
        path = Path(path)
        root = Path(root) if root is not None else path.parent
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 tab-separated fields")
            rel, label_name, split, box_text = parts
            full = root / rel
            if not full.exists():
                raise DatasetError(f"{path}:{lineno}: image missing on disk: {full}")
            box = None if box_text == "-" else tuple(int(v) for v in box_text.split(","))
            records.append(DatasetRecord(full, ClassLabel[label_name], split, box))
        return cls(records, root)


def derive_subtype_from_filename(name: str):
    """Map a pneumonia filename to its subtype; None when unrecognizable.

    Case-insensitive substring match; a name carrying both tokens is
    ambiguous and also returns None.
    """
    lowered = name.lower()
    has_bacteria = "bacteria" in lowered
    has_virus = "virus" in lowered
    if has_bacteria and not has_virus:
        return ClassLabel.BACTERIAL
    if has_virus and not has_bacteria:
        return ClassLabel.VIRAL
    return None


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def ingest_kermany_layout(root) -> DatasetIndex:
    """Scan train/{NORMAL,PNEUMONIA} and test/{NORMAL,PNEUMONIA} into an index.

    Every pneumonia file must carry a recognizable subtype token; offenders
    are collected and reported together so one pass fixes them all.
    """
    root = Path(root)
    records = []
    unlabeled = []
    for split in ("train", "test"):
        for folder in ("NORMAL", "PNEUMONIA"):
            directory = root / split / folder
            if not directory.is_dir():
                raise DatasetError(f"missing dataset directory: {directory}")
            for path in sorted(directory.iterdir()):
                if path.suffix.lower() not in _IMAGE_SUFFIXES:
                    continue
                if folder == "NORMAL":
                    label = ClassLabel.NORMAL
                else:
                    label = derive_subtype_from_filename(path.name)
                    if label is None:
                        unlabeled.append(path)
                        continue
                records.append(DatasetRecord(path, label, split))
    if unlabeled:
        listing = "\n  ".join(str(p) for p in unlabeled)
        raise DatasetError(
            f"{len(unlabeled)} PNEUMONIA file(s) carry no recognizable subtype token:\n  {listing}")
    return DatasetIndex(records, root)


def stratified_split(records: list[DatasetRecord], train_fraction: float = 0.8,
                     seed: int = 0) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Shuffle each class with the seeded generator and carve off the val fold.

    Per class c the validation count is floor(n_c * (1 - train_fraction)),
    evaluated in exact rational arithmetic: the float 0.8 is a hair below
    4/5, and naive float floors would lose a sample per class.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    by_class: dict[int, list[DatasetRecord]] = {c: [] for c in range(NUM_CLASSES)}
    for r in records:
        by_class[int(r.label)].append(r)
    for c in range(NUM_CLASSES):
        if not by_class[c]:
            raise DatasetError(f"class {CLASS_NAMES[c]!r} has no records to split")

    val_fraction = 1 - Fraction(train_fraction).limit_denominator(10**6)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in range(NUM_CLASSES):
        group = by_class[c]
        n_val = int(len(group) * val_fraction)  # Fraction floor
        order = rng.permutation(len(group))
        for j, i in enumerate(order):
            record = group[i]
            if j < n_val:
                val.append(replace(record, split="val"))
            else:
                train.append(replace(record, split="train"))
    return train, val


def compute_class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights w_c = N / (K * n_c)."""
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 1):
        raise DatasetError(f"class weights need every class populated, got counts {counts.tolist()}")
    n = counts.sum()
    return n / (len(counts) * counts)


def normalize(raw) -> np.ndarray:
    """Map 8-bit intensities to [0, 1]."""
    return np.asarray(raw, dtype=np.float64) / 255.0


def load_image(path, side: int) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB image to a (side, side, 3) array in [0, 1].

    Grayscale content is replicated across the three channels; resizing uses
    the same bilinear resampler as heatmap upsampling.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "L":
                arr = np.asarray(img, dtype=np.float64)[..., None].repeat(3, axis=2)
            elif mode == "RGB":
                arr = np.asarray(img, dtype=np.float64)
            else:
                raise DatasetError(
                    f"{path}: unsupported image mode {mode!r} (need 8-bit L or RGB)")
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"{path}: cannot decode image: {exc}") from exc
    if arr.shape[:2] != (side, side):
        arr = bilinear_resize(arr, side, side)
    return normalize(arr)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 15.0
    flip_prob: float = 0.5
    shift_frac: float = 0.10
    zoom_frac: float = 0.10
    brightness_range: tuple[float, float] = (0.9, 1.1)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(rotation_deg=0.0, flip_prob=0.0, shift_frac=0.0, zoom_frac=0.0,
                   brightness_range=(1.0, 1.0))


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic training-time transform of an image in [0, 1].

    Geometry composes rotation -> shift -> zoom -> flip in that fixed order as
    a single inverse-mapped bilinear warp with zero fill, then brightness
    scaling; output is clamped back to [0, 1]. Parameters are drawn in a fixed
    order from the supplied stream, so results are a pure function of
    (image, config, stream state). Labels are untouched by construction.
    """
    h, w = image.shape[:2]
    angle = math.radians(rng.uniform(-config.rotation_deg, config.rotation_deg))
    dy = rng.uniform(-config.shift_frac, config.shift_frac) * h
    dx = rng.uniform(-config.shift_frac, config.shift_frac) * w
    zoom = rng.uniform(1.0 - config.zoom_frac, 1.0 + config.zoom_frac)
    flip = rng.random() < config.flip_prob
    brightness = rng.uniform(*config.brightness_range)

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    if flip:
        xs = (w - 1) - xs
    # Inverse of zoom(shift(rotate(.))) about the image center.
    uy = (ys - cy) / zoom - dy
    ux = (xs - cx) / zoom - dx
    cos_t, sin_t = math.cos(-angle), math.sin(-angle)
    src_y = cos_t * uy - sin_t * ux + cy
    src_x = sin_t * uy + cos_t * ux + cx

    out = _sample_bilinear_zero_fill(image, src_y, src_x)
    return np.clip(out * brightness, 0.0, 1.0)


def _sample_bilinear_zero_fill(image, src_y, src_x):
    h, w = image.shape[:2]
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    wy = src_y - y0
    wx = src_x - x0
    out = np.zeros(src_y.shape + image.shape[2:], dtype=np.float64)
    weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    corners = ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1))
    for weight, (yc, xc) in zip(weights, corners):
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        yk = np.clip(yc, 0, h - 1)
        xk = np.clip(xc, 0, w - 1)
        contrib = weight * valid
        if image.ndim == 3:
            contrib = contrib[..., None]
        out += image[yk, xk] * contrib
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    """Three-class stand-in corpus: clear fields, one bright focal ellipse with
    a recorded bounding box, and diffuse speckle texture."""

    per_class: int = 200
    side: int = 64
    seed: int = 0
    test_fraction: float = 0.2


def synthesize_dataset(spec: SyntheticSpec, out_root) -> DatasetIndex:
    """Write the synthetic corpus as PNGs in the standard layout plus a sidecar.

    Deterministic: the same spec produces byte-identical files. Bacterial
    records carry the ground-truth ellipse bounding box used by the
    localization checks.
    """
    if spec.side < 16:
        raise DatasetError(f"synthetic images need side >= 16, got {spec.side}")
    out_root = Path(out_root)
    rng = np.random.default_rng(spec.seed)
    n_test = int(round(spec.per_class * spec.test_fraction))
    n_train = spec.per_class - n_test
    records = []
    for split, count in (("train", n_train), ("test", n_test)):
        for label in (ClassLabel.NORMAL, ClassLabel.BACTERIAL, ClassLabel.VIRAL):
            folder = out_root / split / ("NORMAL" if label == ClassLabel.NORMAL else "PNEUMONIA")
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                image, box = _render_synthetic(label, spec.side, rng)
                if label == ClassLabel.NORMAL:
                    name = f"synthetic_{split}_normal_{i:04d}.png"
                elif label == ClassLabel.BACTERIAL:
                    name = f"synthetic_{split}_{i:04d}_bacteria.png"
                else:
                    name = f"synthetic_{split}_{i:04d}_virus.png"
                path = folder / name
                quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
                Image.fromarray(quantized, mode="L").save(path, format="PNG")
                records.append(DatasetRecord(path, label, split, box))
    index = DatasetIndex(records, out_root)
    index.save(out_root / "index.tsv")
    return index


def _render_synthetic(label: ClassLabel, side: int, rng: np.random.Generator):
    # Near-black background, like the air around a radiograph: lesion-evidence
    # channels stay silent away from the lesion, which also keeps localization
    # maps clean (background activations match the zero-padding level).
    base = rng.uniform(0.02, 0.06)
    tilt = rng.uniform(-0.01, 0.01)
    rows = np.linspace(-0.5, 0.5, side)[:, None]
    image = base + tilt * rows + rng.normal(0.0, 0.01, (side, side))
    box = None
    if label == ClassLabel.BACTERIAL:
        cy = rng.uniform(0.34, 0.66) * side
        cx = rng.uniform(0.34, 0.66) * side
        a = rng.uniform(0.18, 0.30) * side
        b = rng.uniform(0.18, 0.30) * side
        phi = rng.uniform(0.0, math.pi)
        amp = rng.uniform(0.60, 0.80)
        ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        u = math.cos(phi) * (xs - cx) + math.sin(phi) * (ys - cy)
        v = -math.sin(phi) * (xs - cx) + math.cos(phi) * (ys - cy)
        rho2 = (u / a) ** 2 + (v / b) ** 2
        image = image + amp * np.maximum(0.0, 1.0 - rho2)
        ey = math.sqrt((a * math.sin(phi)) ** 2 + (b * math.cos(phi)) ** 2)
        ex = math.sqrt((a * math.cos(phi)) ** 2 + (b * math.sin(phi)) ** 2)
        box = (max(0, int(math.floor(cy - ey))), max(0, int(math.floor(cx - ex))),
               min(side, int(math.ceil(cy + ey)) + 1), min(side, int(math.ceil(cx + ex)) + 1))
    elif label == ClassLabel.VIRAL:
        image = image + rng.normal(0.0, 0.12, (side, side))
    return np.clip(image, 0.0, 1.0), box
