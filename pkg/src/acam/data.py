"""Phantom datasets, manifest ingestion, patient-disjoint splits and batching."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .contrast import GrayImage
from .diffcore import Tensor
from .rng import generator

CLASS_NAMES = (
    "fetal_abdomen",
    "fetal_brain",
    "fetal_femur",
    "fetal_thorax",
    "maternal_cervix",
    "other",
)
SPLITS = ("train", "test", "unassigned")
MANIFEST_COLUMNS = ("image_name", "patient_id", "class", "split")


class IngestionError(ValueError):
    """Malformed manifest or image file."""


def class_names(num_classes: int) -> tuple[str, ...]:
    if num_classes == len(CLASS_NAMES):
        return CLASS_NAMES
    return tuple(f"class_{i}" for i in range(num_classes))


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM; float input is clamped to [0, 1] and scaled to 0..255."""
    arr = pixels if pixels.dtype == np.uint8 else to_uint8(pixels)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a P5 or P2 PGM as float32 in [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P2"):
        raise IngestionError(f"{path}: not a PGM file (magic {magic!r})")
    try:
        (w, h, maxval), pos = _pgm_tokens(buf[2:], 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise IngestionError(f"{path}: malformed PGM header") from exc
    body = buf[2 + pos :]
    if magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        arr = np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w)
    else:
        arr = np.array(body.split()[: w * h], dtype=np.int64).reshape(h, w)
    return (arr.astype(np.float32) / np.float32(maxval)).astype(np.float32)


# ---------------------------------------------------------------------------
# records and datasets
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    image_path: str
    label: int
    patient_id: str
    split: str = "unassigned"

    def __post_init__(self):
        if not self.image_path:
            raise IngestionError("image_path must be non-empty")
        if self.split not in SPLITS:
            raise IngestionError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class Dataset:
    """Images [N, H, W] in [0, 1] with their manifest records."""

    images: np.ndarray
    records: list[ManifestRecord]
    num_classes: int = len(CLASS_NAMES)

    def __post_init__(self):
        if len(self.images) != len(self.records):
            raise ValueError("images and records must have equal length")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [Path(r.image_path).stem for r in self.records]

    def subset(self, split: str) -> "Dataset":
        idx = [i for i, r in enumerate(self.records) if r.split == split]
        return Dataset(self.images[idx], [self.records[i] for i in idx], self.num_classes)

    def with_records(self, records: list[ManifestRecord]) -> "Dataset":
        return Dataset(self.images, records, self.num_classes)

    def gray_images(self) -> list[GrayImage]:
        return [
            GrayImage(img, id=Path(r.image_path).stem, label=r.label, patient_id=r.patient_id)
            for img, r in zip(self.images, self.records)
        ]


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    num_classes: int = 6
    images_per_class: int = 150
    height: int = 64
    width: int = 64
    contrast_range: tuple[float, float] = (0.15, 0.8)
    speckle_strength: float = 0.25
    blur_sigma: float = 1.0
    patient_block: int = 6
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.contrast_range
        if not 2 <= self.num_classes <= 6:
            raise ValueError(f"phantoms support 2..6 classes, got {self.num_classes}")
        if self.images_per_class < 1:
            raise ValueError(f"images_per_class must be >= 1, got {self.images_per_class}")
        if min(self.height, self.width) < 8:
            raise ValueError(f"phantom size must be >= 8x8, got {self.height}x{self.width}")
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"contrast_range must satisfy 0 < low <= high <= 1, got {self.contrast_range}")
        if self.speckle_strength < 0 or self.blur_sigma < 0:
            raise ValueError("speckle_strength and blur_sigma must be >= 0")
        if self.patient_block < 1:
            raise ValueError(f"patient_block must be >= 1, got {self.patient_block}")


def _shape_mask(label: int, u: np.ndarray, v: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    r = np.hypot(u, v)
    if label == 0:  # elliptical ring
        e = np.hypot(u / (0.6 * s), v / (0.45 * s))
        return (e > 0.75) & (e < 1.0)
    if label == 1:  # bar
        return (np.abs(u) < 0.65 * s) & (np.abs(v) < 0.1 * s)
    if label == 2:  # disc pair
        d = 0.32 * s
        return (np.hypot(u - d, v) < 0.2 * s) | (np.hypot(u + d, v) < 0.2 * s)
    if label == 3:  # wedge
        ang = np.arctan2(v, u)
        return (r < 0.65 * s) & (np.abs(ang) < 0.45)
    if label == 4:  # crescent
        return (r < 0.5 * s) & (np.hypot(u - 0.2 * s, v) > 0.42 * s)
    # random blobs
    mask = np.zeros(u.shape, dtype=bool)
    for _ in range(int(rng.integers(3, 6))):
        cx, cy = rng.uniform(-0.6, 0.6, size=2) * s
        rad = rng.uniform(0.07, 0.16) * s
        mask |= np.hypot(u - cx, v - cy) < rad
    return mask


def render_phantom(label: int, spec: PhantomSpec, rng: np.random.Generator, base_level: float) -> np.ndarray:
    h, w = spec.height, spec.width
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    s = rng.uniform(0.8, 1.15)
    theta = rng.uniform(0, 2 * math.pi)
    ct, st = math.cos(theta), math.sin(theta)
    u = ct * (xx - cx) + st * (yy - cy)
    v = -st * (xx - cx) + ct * (yy - cy)
    mask = _shape_mask(label, u, v, s, rng).astype(np.float64)

    lo, hi = spec.contrast_range
    c = rng.uniform(lo, hi) if hi > lo else lo
    bg = base_level * (1.0 - c)
    img = bg + c * mask
    if spec.speckle_strength > 0:
        k = 1.0 / spec.speckle_strength**2
        img = img * rng.gamma(k, 1.0 / k, size=img.shape)
    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="nearest")
    img = np.clip(img, 0.0, 1.0)
    # quantize so disk round-trips through 8-bit PGM are exact
    return (to_uint8(img).astype(np.float32) / np.float32(255.0)).astype(np.float32)


def generate_phantoms(spec: PhantomSpec) -> tuple[list[GrayImage], list[ManifestRecord]]:
    """Deterministic synthetic dataset; images interleave classes, patients own consecutive blocks."""
    spec.validate()
    n = spec.num_classes * spec.images_per_class
    images, manifest = [], []
    patient_levels: dict[int, float] = {}
    for i in range(n):
        label = i % spec.num_classes
        p = i // spec.patient_block
        if p not in patient_levels:
            patient_levels[p] = float(generator(spec.seed, "patient", p).uniform(0.0, 1.0))
        pixels = render_phantom(label, spec, generator(spec.seed, "image", i), patient_levels[p])
        img_id = f"img_{i:05d}"
        pid = f"P{p:04d}"
        images.append(GrayImage(pixels, id=img_id, label=label, patient_id=pid))
        manifest.append(ManifestRecord(f"{img_id}.pgm", label, pid))
    return images, manifest


def phantom_dataset(spec: PhantomSpec) -> Dataset:
    images, records = generate_phantoms(spec)
    return Dataset(np.stack([im.pixels for im in images]), records, spec.num_classes)


# ---------------------------------------------------------------------------
# manifest CSV
# ---------------------------------------------------------------------------


def write_manifest(path, records: Sequence[ManifestRecord], names: Sequence[str] = CLASS_NAMES) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.image_path, r.patient_id, names[r.label], r.split])


def load_manifest(csv_path, names: Sequence[str] = CLASS_NAMES, check_files: bool = True) -> list[ManifestRecord]:
    """Parse a manifest; ``image_name`` is resolved relative to the manifest's directory."""
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise IngestionError(f"{csv_path}: manifest not found")
    lookup = {n: i for i, n in enumerate(names)}
    root = csv_path.parent
    records = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError(f"{csv_path}: empty file, header row required")
        missing = [c for c in ("image_name", "patient_id", "class") if c not in reader.fieldnames]
        if missing:
            raise IngestionError(f"{csv_path}: missing required column(s) {missing}")
        for row_no, row in enumerate(reader, start=2):
            name = (row.get("class") or "").strip()
            if name not in lookup:
                raise IngestionError(f"{csv_path}: row {row_no}: unknown class {name!r}")
            image_name = (row.get("image_name") or "").strip()
            if not image_name:
                raise IngestionError(f"{csv_path}: row {row_no}: empty image_name")
            split = (row.get("split") or "").strip() or "unassigned"
            if split not in SPLITS:
                raise IngestionError(f"{csv_path}: row {row_no}: unknown split {split!r}")
            if check_files:
                full = root / image_name
                if not (full.is_file() and os.access(full, os.R_OK)):
                    raise IngestionError(f"{csv_path}: row {row_no}: unreadable image path {image_name!r}")
            records.append(ManifestRecord(image_name, lookup[name], (row.get("patient_id") or "").strip(), split))
    return records


def resize_square(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape == (size, size):
        return pixels
    zoom = (size / pixels.shape[0], size / pixels.shape[1])
    out = ndimage.zoom(pixels.astype(np.float64), zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0, 1).astype(np.float32)


def load_dataset(
    csv_path, names: Sequence[str] = CLASS_NAMES, image_size: int | None = None
) -> Dataset:
    records = load_manifest(csv_path, names)
    root = Path(csv_path).parent
    images = []
    for r in records:
        px = read_pgm(root / r.image_path)
        if image_size is not None:
            px = resize_square(px, image_size)
        images.append(px)
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise IngestionError(f"{csv_path}: images have mixed sizes {sorted(shapes)}; set an image_size")
    return Dataset(np.stack(images) if images else np.zeros((0, 8, 8), np.float32), records, len(names))


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


def patient_split(
    records: Sequence[ManifestRecord], train_fraction: float = 0.7, seed: int = 0, level: str = "patient"
) -> list[ManifestRecord]:
    """Assign train/test so no patient straddles both sides.

    Patients are shuffled by ``seed``; the train side is the prefix of that
    order whose image count is closest to ``train_fraction`` of the total.
    ``level="image"`` treats every image as its own patient.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if level not in ("patient", "image"):
        raise ValueError(f"level must be 'patient' or 'image', got {level!r}")
    keys = [r.patient_id if level == "patient" else str(i) for i, r in enumerate(records)]
    groups = list(dict.fromkeys(keys))
    if len(groups) < 2:
        raise ValueError("cannot split a dataset with fewer than two patients")
    counts = {g: 0 for g in groups}
    for k in keys:
        counts[k] += 1
    order = [groups[i] for i in generator(seed, "split").permutation(len(groups))]
    target = train_fraction * len(records)
    best_n, best_gap, running = 1, math.inf, 0
    for n in range(1, len(order)):
        running += counts[order[n - 1]]
        gap = abs(running - target)
        if gap < best_gap:
            best_n, best_gap = n, gap
    train_groups = set(order[:best_n])
    return [replace(r, split="train" if k in train_groups else "test") for r, k in zip(records, keys)]


def batch_iter(
    data: Dataset, batch_size: int, shuffle: bool = True, seed: int = 0, epoch: int = 0, dtype=np.float32
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield ([B, 1, H, W] tensor, labels) batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(data) == 0:
        raise ValueError("batch_iter: empty dataset")
    n = len(data)
    order = generator(seed, "batches", epoch).permutation(n) if shuffle else np.arange(n)
    labels = data.labels
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = data.images[idx][:, None].astype(dtype, copy=False)
        yield Tensor(np.ascontiguousarray(x)), labels[idx]
