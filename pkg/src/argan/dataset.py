"""Two-class traffic-sign dataset handling.

Ingests the STOP / SPEED_LIMIT subset from annotated video frames, produces
deterministic 60/20/20 splits, and provides a procedural synthetic stand-in so
the full pipeline can run without the external dataset.

Images are float32 tensors of shape (3, 32, 32). Classifiers consume the
``unit`` range ([0, 1]); the GAN operates in the ``signed`` range ([-1, 1]).
``convert_range`` is the only crossing point between the two.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .common import array_content_hash, tensor_content_hash

logger = logging.getLogger(__name__)

CLASS_NAMES = ("STOP", "SPEED_LIMIT")
STOP, SPEED_LIMIT = 0, 1

IMAGE_SHAPE = (3, 32, 32)

# Shuffling for splits uses numpy's default_rng (PCG64) with this seed unless
# the caller overrides it; pinned so splits are stable across runs.
DEFAULT_SPLIT_SEED = 42

MANIFEST_COLUMNS = ("frame_path", "class_name", "x_min", "y_min", "x_max", "y_max")


class RangeTag(str, Enum):
    UNIT = "unit"      # pixel values in [0, 1]
    SIGNED = "signed"  # pixel values in [-1, 1]


_RANGE_BOUNDS = {RangeTag.UNIT: (0.0, 1.0), RangeTag.SIGNED: (-1.0, 1.0)}


class IngestError(RuntimeError):
    """Raised when the source material for ingestion is missing or malformed."""


@dataclass(frozen=True)
class ImageTensor:
    """A single 3x32x32 image with a declared pixel range."""

    data: torch.Tensor
    range_tag: RangeTag = RangeTag.UNIT

    def __post_init__(self):
        if tuple(self.data.shape) != IMAGE_SHAPE:
            raise ValueError(f"expected shape {IMAGE_SHAPE}, got {tuple(self.data.shape)}")
        lo, hi = _RANGE_BOUNDS[self.range_tag]
        if not torch.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")
        if self.data.min().item() < lo - 1e-6 or self.data.max().item() > hi + 1e-6:
            raise ValueError(f"pixel values outside declared range {self.range_tag.value}")

    @property
    def content_hash(self) -> str:
        return tensor_content_hash(self.data)


@dataclass
class LabeledDataset:
    """Ordered labeled image collection for one split (or the unsplit whole)."""

    images: torch.Tensor        # (N, 3, 32, 32) float32
    labels: torch.Tensor        # (N,) int64, indexes CLASS_NAMES
    range_tag: RangeTag = RangeTag.UNIT
    split_tag: str | None = None        # "train" | "validation" | "test" | None
    provenance: str = "synthetic"       # "lisa_subset" | "synthetic"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or tuple(self.images.shape[1:]) != IMAGE_SHAPE:
            raise ValueError(f"images must be (N, 3, 32, 32), got {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must align with images")
        if len(self) and not bool(((self.labels == 0) | (self.labels == 1)).all()):
            raise ValueError("labels must be drawn from the two-class set")
        lo, hi = _RANGE_BOUNDS[self.range_tag]
        if len(self):
            mn, mx = self.images.min().item(), self.images.max().item()
            if mn < lo - 1e-6 or mx > hi + 1e-6:
                raise ValueError(f"pixels outside declared {self.range_tag.value} range")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def item(self, i: int) -> tuple[ImageTensor, int]:
        return ImageTensor(self.images[i], self.range_tag), int(self.labels[i])

    def content_hashes(self) -> list[str]:
        return [tensor_content_hash(self.images[i]) for i in range(len(self))]

    def dataset_hash(self) -> str:
        return tensor_content_hash(self.images) + ":" + tensor_content_hash(self.labels.float())

    def subset(self, indices) -> "LabeledDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return LabeledDataset(self.images[idx].clone(), self.labels[idx].clone(),
                              self.range_tag, self.split_tag, self.provenance)

    def to_range(self, target: RangeTag) -> "LabeledDataset":
        if target == self.range_tag:
            return self
        imgs = convert_tensor_range(self.images, self.range_tag, target)
        return LabeledDataset(imgs, self.labels.clone(), target, self.split_tag, self.provenance)


def convert_tensor_range(x: torch.Tensor, src: RangeTag, dst: RangeTag) -> torch.Tensor:
    if src == dst:
        return x.clone()
    if src == RangeTag.UNIT and dst == RangeTag.SIGNED:
        return x * 2.0 - 1.0
    if src == RangeTag.SIGNED and dst == RangeTag.UNIT:
        return (x + 1.0) / 2.0
    raise ValueError(f"unsupported conversion {src} -> {dst}")


def convert_range(img: ImageTensor, target: RangeTag) -> ImageTensor:
    """Affine range conversion: x -> 2x-1 (unit to signed) or x -> (x+1)/2.

    Round-tripping is the identity to machine precision.
    """
    return ImageTensor(convert_tensor_range(img.data, img.range_tag, target), target)


def normalize_class_name(raw: str) -> int:
    """Map a manifest class name to a label index.

    All speed-limit variants (speedLimit15 ... speedLimit65, bare speedLimit)
    collapse into SPEED_LIMIT.
    """
    name = raw.strip().lower()
    if name == "stop":
        return STOP
    if name.replace("_", "").startswith("speedlimit") or name == "speed_limit":
        return SPEED_LIMIT
    raise IngestError(f"unknown class name {raw!r}")


def _square_box(x1: int, y1: int, x2: int, y2: int, width: int, height: int):
    """Expand a box to a square by padding the shorter side equally, clamped to the frame."""
    w, h = x2 - x1, y2 - y1
    if w < h:
        pad = h - w
        x1 -= pad // 2
        x2 += pad - pad // 2
    elif h < w:
        pad = w - h
        y1 -= pad // 2
        y2 += pad - pad // 2
    return max(0, x1), max(0, y1), min(width, x2), min(height, y2)


def _load_frame(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")  # grayscale frames replicate across channels
        return np.asarray(im)


def ingest_lisa_subset(source_dir: str | Path, annotation_manifest: str | Path) -> LabeledDataset:
    """Build the two-class dataset from annotated frames.

    Args:
        source_dir: directory containing the frame images referenced by the manifest.
        annotation_manifest: CSV with columns
            (frame_path, class_name, x_min, y_min, x_max, y_max); box edges are
            pixel coordinates with exclusive max edges.

    Returns:
        LabeledDataset of 3x32x32 unit-range images. Rows whose bounding box is
        degenerate or falls outside the frame are skipped (count recorded in
        ``metadata["skipped_rows"]``); duplicate image content is dropped so
        content hashes are unique (``metadata["duplicate_rows"]``).

    Raises:
        IngestError: source directory missing/empty, manifest malformed, a
            referenced frame file missing, or an unknown class name.
    """
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise IngestError(f"source directory {source_dir} does not exist")
    if not any(source_dir.iterdir()):
        raise IngestError(f"source directory {source_dir} is empty")

    with open(annotation_manifest, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not set(MANIFEST_COLUMNS).issubset(reader.fieldnames):
            raise IngestError(
                f"manifest must have columns {MANIFEST_COLUMNS}, got {reader.fieldnames}")
        rows = list(reader)

    images, labels = [], []
    seen_hashes: set[str] = set()
    skipped = duplicates = 0
    frame_cache: dict[str, np.ndarray] = {}

    for i, row in enumerate(rows):
        label = normalize_class_name(row["class_name"])
        frame_rel = row["frame_path"]
        frame_path = source_dir / frame_rel
        if not frame_path.is_file():
            raise IngestError(f"row {i}: frame file {frame_rel!r} not found under {source_dir}")
        key = str(frame_path)
        if key not in frame_cache:
            frame_cache[key] = _load_frame(frame_path)
        frame = frame_cache[key]
        height, width = frame.shape[:2]

        x1, y1, x2, y2 = (int(row[c]) for c in ("x_min", "y_min", "x_max", "y_max"))
        if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
            logger.warning("row %d: bounding box (%d,%d,%d,%d) outside %dx%d frame %s; skipped",
                           i, x1, y1, x2, y2, width, height, frame_rel)
            skipped += 1
            continue

        sx1, sy1, sx2, sy2 = _square_box(x1, y1, x2, y2, width, height)
        crop = Image.fromarray(frame[sy1:sy2, sx1:sx2])
        crop = crop.resize((32, 32), Image.BILINEAR)
        arr = np.asarray(crop, dtype=np.float32) / 255.0   # (32, 32, 3)
        img = torch.from_numpy(arr.transpose(2, 0, 1).copy())

        h = tensor_content_hash(img)
        if h in seen_hashes:
            duplicates += 1
            continue
        seen_hashes.add(h)
        images.append(img)
        labels.append(label)

    if not images:
        raise IngestError("ingestion produced zero items")
    ds = LabeledDataset(torch.stack(images), torch.tensor(labels, dtype=torch.long),
                        RangeTag.UNIT, None, "lisa_subset")
    ds.metadata["skipped_rows"] = skipped
    ds.metadata["duplicate_rows"] = duplicates
    if skipped or duplicates:
        logger.warning("ingestion skipped %d rows, dropped %d duplicates", skipped, duplicates)
    return ds


def split_dataset(ds: LabeledDataset, seed: int = DEFAULT_SPLIT_SEED):
    """Deterministic 60/20/20 split after a seeded global shuffle.

    Split sizes are floor(0.6 N) / floor(0.2 N) / remainder. The shuffle is an
    unstratified permutation from ``numpy.random.default_rng(seed)``.

    Returns:
        (train, validation, test) LabeledDatasets.

    Raises:
        ValueError: if the dataset has fewer than 5 items (cannot produce three
            non-empty splits at these fractions).
    """
    n = len(ds)
    if n < 5:
        raise ValueError(f"need at least 5 items to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(0.6 * n))
    n_val = int(np.floor(0.2 * n))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    out = []
    for tag, idx in zip(("train", "validation", "test"), parts):
        sub = ds.subset(idx)
        sub.split_tag = tag
        out.append(sub)
    return tuple(out)


def _octagon_mask(yy, xx, cy, cx, radius):
    u, v = np.abs(xx - cx), np.abs(yy - cy)
    return (u <= radius) & (v <= radius) & (u + v <= 1.3 * radius)


def _rect_mask(yy, xx, cy, cx, half_w, half_h):
    return (np.abs(xx - cx) <= half_w) & (np.abs(yy - cy) <= half_h)


def generate_synthetic_dataset(n_per_class: int, seed: int) -> LabeledDataset:
    """Procedural two-class stand-in dataset.

    Class 0 is an octagon-like blob, class 1 a rectangle-like blob, over a
    mid-gray background. Both classes share the same distribution of fill
    color, per-image sharpness (random blur) and per-image noise level, so
    only the silhouette separates them: a small classifier still reaches high
    accuracy within a few epochs, yet its decision margin stays small enough
    that gradient attacks at moderate budgets genuinely degrade it, while
    generator reconstructions land inside the training distribution. Fully
    deterministic under (n_per_class, seed).
    """
    if n_per_class <= 0:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32)
    images = np.empty((2 * n_per_class, 3, 32, 32), dtype=np.float32)
    labels = np.empty(2 * n_per_class, dtype=np.int64)

    for i in range(2 * n_per_class):
        label = i % 2
        bg = 0.35 + rng.uniform(-0.04, 0.04)
        noise = rng.uniform(0.01, 0.07)
        img = np.full((3, 32, 32), bg, dtype=np.float32)

        cy = 16.0 + rng.uniform(-2.0, 2.0)
        cx = 16.0 + rng.uniform(-2.0, 2.0)
        fill = bg + 0.35 + rng.uniform(-0.03, 0.03)
        tilt = rng.uniform(-0.05, 0.05)
        color = np.array([fill + tilt, fill, fill - tilt], dtype=np.float32)
        if label == STOP:
            mask = _octagon_mask(yy, xx, cy, cx, rng.uniform(9.0, 12.0))
        else:
            mask = _rect_mask(yy, xx, cy, cx, rng.uniform(7.0, 10.0),
                              rng.uniform(9.0, 12.0))
        img[:, mask] = color[:, None]

        blur = rng.uniform(0.0, 1.2)
        if blur > 0.1:
            for c in range(3):
                img[c] = gaussian_filter(img[c], blur)
        img += rng.normal(0.0, noise, size=(3, 32, 32)).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label

    return LabeledDataset(torch.from_numpy(images), torch.from_numpy(labels),
                          RangeTag.UNIT, None, "synthetic")


def save_archive(splits: dict[str, LabeledDataset], out_dir: str | Path) -> Path:
    """Write splits as 8-bit PNGs under STOP/ and SPEED_LIMIT/ plus manifest.csv.

    Manifest columns: file, class, split, content_sha256 (hash of the 8-bit
    HWC pixel content, so it is stable across PNG encoders).
    """
    out_dir = Path(out_dir)
    for name in CLASS_NAMES:
        (out_dir / name).mkdir(parents=True, exist_ok=True)
    rows = []
    counter = 0
    for split_tag, ds in splits.items():
        unit = ds.to_range(RangeTag.UNIT)
        for i in range(len(unit)):
            arr = (unit.images[i].numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
            cls = CLASS_NAMES[int(unit.labels[i])]
            rel = f"{cls}/{counter:06d}.png"
            Image.fromarray(arr).save(out_dir / rel)
            rows.append({"file": rel, "class": cls, "split": split_tag,
                         "content_sha256": array_content_hash(arr)})
            counter += 1
    with open(out_dir / "manifest.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=("file", "class", "split", "content_sha256"))
        writer.writeheader()
        writer.writerows(rows)
    return out_dir


def load_archive(archive_dir: str | Path, provenance: str = "synthetic") -> dict[str, LabeledDataset]:
    """Load an archive written by ``save_archive``; verifies content hashes."""
    archive_dir = Path(archive_dir)
    manifest = archive_dir / "manifest.csv"
    if not manifest.is_file():
        raise IngestError(f"archive manifest {manifest} not found")
    by_split: dict[str, list] = {}
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            with Image.open(archive_dir / row["file"]) as im:
                arr = np.asarray(im.convert("RGB"))
            if array_content_hash(arr) != row["content_sha256"]:
                raise IngestError(f"archive content hash mismatch for {row['file']}")
            img = torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)
            by_split.setdefault(row["split"], []).append((img, CLASS_NAMES.index(row["class"])))
    out = {}
    for split_tag, items in by_split.items():
        images = torch.stack([it[0] for it in items])
        labels = torch.tensor([it[1] for it in items], dtype=torch.long)
        out[split_tag] = LabeledDataset(images, labels, RangeTag.UNIT, split_tag, provenance)
    return out
