"""Corpus loading, deterministic splits, defect statistics and batching."""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import kernels
from .masks import CLASS_IDS, RleValidationError, RleDecodeError, RlePayload, masks_from_rles, resize_mask

log = logging.getLogger(__name__)

SPLITS = ("train", "eval", "test")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")


@dataclass
class SampleRecord:
    """One image and its annotations.

    Pixels and masks are materialised lazily so that a full corpus index only
    costs the RLE strings.  In-memory samples (fixtures, augmentation output)
    pass ``image_array`` / ``mask_array`` directly.
    """

    image_id: str
    height: int
    width: int
    image_path: Path | None = None
    rles: dict[int, RlePayload] = field(default_factory=dict)
    image_array: np.ndarray | None = field(default=None, repr=False)
    mask_array: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_arrays(cls, image_id: str, image: np.ndarray, mask: np.ndarray) -> "SampleRecord":
        if image.shape[:2] != mask.shape:
            raise ValueError(f"{image_id}: image {image.shape[:2]} and mask {mask.shape} differ in size")
        return cls(image_id, mask.shape[0], mask.shape[1], image_array=image, mask_array=mask.astype(np.uint8))

    def load_image(self) -> np.ndarray:
        """``(H, W, 3)`` uint8 pixels."""
        if self.image_array is not None:
            return self.image_array
        if self.image_path is None:
            raise FileNotFoundError(f"{self.image_id}: no pixels and no image path")
        with Image.open(self.image_path) as im:
            return np.asarray(im.convert("RGB"))

    @cached_property
    def mask(self) -> np.ndarray:
        if self.mask_array is not None:
            return self.mask_array
        return masks_from_rles(self.rles, self.height, self.width)

    @property
    def defect_classes_present(self) -> frozenset[int]:
        return frozenset(int(v) for v in np.unique(self.mask) if v != 0)


@dataclass(frozen=True)
class LoadIssue:
    image_id: str
    reason: str


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple[SampleRecord, ...]
    split_assignment: dict[str, str] = field(default_factory=dict)
    split_seed: int | None = None
    issues: tuple[LoadIssue, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[SampleRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        if not self.split_assignment:
            raise ValueError("index has not been split; call split_dataset first")
        return [r for r in self.records if self.split_assignment[r.image_id] == name]


# --------------------------------------------------------------------------
# loading


def _read_annotation_rows(csv_path: Path) -> list[tuple[str, int, str]]:
    """Accept both ``ImageId,ClassId,EncodedPixels`` and ``ImageId_ClassId,EncodedPixels``."""
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for row in reader:
            if "ImageId_ClassId" in fields:
                image_id, class_id = row["ImageId_ClassId"].rsplit("_", 1)
            elif {"ImageId", "ClassId"} <= set(fields):
                image_id, class_id = row["ImageId"], row["ClassId"]
            else:
                raise ValueError(f"{csv_path}: unrecognised annotation columns {fields}")
            rows.append((image_id, int(class_id), row.get("EncodedPixels") or ""))
    return rows


def load_annotations(csv_source: str | Path, image_directory: str | Path) -> DatasetIndex:
    """Index every image in ``image_directory`` with its CSV annotations.

    Images without CSV rows become defect-free negatives.  Missing images and
    malformed RLE strings are collected as :class:`LoadIssue` entries rather
    than raised.
    """
    image_directory = Path(image_directory)
    if not image_directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_directory}")
    annotations: dict[str, dict[int, str]] = {}
    for image_id, class_id, rle in _read_annotation_rows(Path(csv_source)):
        if rle.strip():
            annotations.setdefault(image_id, {})[class_id] = rle
        else:
            annotations.setdefault(image_id, {})

    on_disk = {p.name: p for p in image_directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    issues: list[LoadIssue] = []
    records: list[SampleRecord] = []
    for image_id in sorted(set(on_disk) | set(annotations)):
        path = on_disk.get(image_id)
        if path is None:
            issues.append(LoadIssue(image_id, "image file missing"))
            continue
        try:
            with Image.open(path) as im:
                width, height = im.size
        except OSError as exc:
            issues.append(LoadIssue(image_id, f"unreadable image: {exc}"))
            continue
        rles = {}
        try:
            for class_id, text in annotations.get(image_id, {}).items():
                if class_id not in CLASS_IDS:
                    raise RleValidationError(f"class id {class_id} out of range")
                payload = RlePayload.from_text(text)
                if payload.runs and payload.runs[-1][0] + payload.runs[-1][1] - 1 > height * width:
                    raise RleDecodeError(f"class {class_id} runs exceed {height}x{width}")
                rles[class_id] = payload
        except (RleValidationError, RleDecodeError) as exc:
            issues.append(LoadIssue(image_id, f"malformed RLE: {exc}"))
            continue
        records.append(SampleRecord(image_id, height, width, image_path=path, rles=rles))
    for issue in issues:
        log.warning("skipping %s: %s", issue.image_id, issue.reason)
    return DatasetIndex(tuple(records), issues=tuple(issues))


# --------------------------------------------------------------------------
# splitting


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Eval and test sizes are ``round(n * ratio)``; train takes the remainder."""
    n_eval = int(math.floor(n * ratios[1] + 0.5))
    n_test = int(math.floor(n * ratios[2] + 0.5))
    n_test = min(n_test, n - n_eval)
    return n - n_eval - n_test, n_eval, n_test


def split_dataset(index: DatasetIndex, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetIndex:
    """Shuffle image ids under ``seed`` and cut train/eval/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive split ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    n = len(index.records)
    n_train, n_eval, _ = split_counts(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    for rank, i in enumerate(order):
        name = "train" if rank < n_train else "eval" if rank < n_train + n_eval else "test"
        assignment[index.records[i].image_id] = name
    return replace(index, split_assignment=assignment, split_seed=seed)


# --------------------------------------------------------------------------
# statistics


@dataclass
class DefectStats:
    """Class imbalance and fragmentation figures.

    A *region* is one (image, class) defect instance, the unit in which the
    Severstal annotations are counted.  A *segment* is one 4-connected
    component of a class within an image.
    """

    image_count: int = 0
    images_with_defect: int = 0
    region_counts: dict[int, int] = field(default_factory=lambda: {c: 0 for c in CLASS_IDS})
    segment_counts: dict[int, int] = field(default_factory=lambda: {c: 0 for c in CLASS_IDS})
    pixel_counts: dict[int, int] = field(default_factory=lambda: {c: 0 for c in CLASS_IDS})
    segments_per_image: dict[int, dict[int, int]] = field(default_factory=lambda: {c: {} for c in CLASS_IDS})

    @property
    def region_total(self) -> int:
        return sum(self.region_counts.values())

    @property
    def count_shares(self) -> dict[int, float]:
        total = self.region_total
        return {c: (self.region_counts[c] / total if total else 0.0) for c in CLASS_IDS}

    @property
    def area_shares(self) -> dict[int, float]:
        total = sum(self.pixel_counts.values())
        return {c: (self.pixel_counts[c] / total if total else 0.0) for c in CLASS_IDS}

    def fraction_with_more_than(self, class_id: int, segments: int) -> float:
        """Share of images containing ``class_id`` that split it into more than ``segments`` pieces."""
        hist = self.segments_per_image[class_id]
        total = sum(hist.values())
        return sum(v for k, v in hist.items() if k > segments) / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "image_count": self.image_count,
            "images_with_defect": self.images_with_defect,
            "region_total": self.region_total,
            "region_counts": {str(c): v for c, v in self.region_counts.items()},
            "count_shares": {str(c): v for c, v in self.count_shares.items()},
            "segment_counts": {str(c): v for c, v in self.segment_counts.items()},
            "pixel_counts": {str(c): v for c, v in self.pixel_counts.items()},
            "area_shares": {str(c): v for c, v in self.area_shares.items()},
            "segments_per_image": {
                str(c): {str(k): v for k, v in sorted(h.items())} for c, h in self.segments_per_image.items()
            },
            "more_than_5_segments": {str(c): self.fraction_with_more_than(c, 5) for c in CLASS_IDS},
            "more_than_10_segments": {str(c): self.fraction_with_more_than(c, 10) for c in CLASS_IDS},
        }

    def format_table(self) -> str:
        lines = [
            f"images: {self.image_count}   with defect: {self.images_with_defect}   regions: {self.region_total}",
            f"{'class':>5} {'regions':>8} {'count %':>8} {'area %':>8} {'segments':>9} {'>5 seg %':>9} {'>10 seg %':>10}",
        ]
        shares, areas = self.count_shares, self.area_shares
        for c in CLASS_IDS:
            lines.append(
                f"{c:>5} {self.region_counts[c]:>8} {100 * shares[c]:>8.2f} {100 * areas[c]:>8.2f} "
                f"{self.segment_counts[c]:>9} {100 * self.fraction_with_more_than(c, 5):>9.2f} "
                f"{100 * self.fraction_with_more_than(c, 10):>10.2f}"
            )
        return "\n".join(lines)


def accumulate_mask_stats(stats: DefectStats, mask: np.ndarray) -> None:
    stats.image_count += 1
    present = False
    for c in CLASS_IDS:
        binary = (mask == c).view(np.uint8)
        area = int(binary.sum())
        if area == 0:
            continue
        present = True
        _, segments = kernels.label_components(binary)
        stats.region_counts[c] += 1
        stats.pixel_counts[c] += area
        stats.segment_counts[c] += segments
        hist = stats.segments_per_image[c]
        hist[segments] = hist.get(segments, 0) + 1
    stats.images_with_defect += present


def compute_stats(index: DatasetIndex | Sequence[SampleRecord]) -> DefectStats:
    records = index.records if isinstance(index, DatasetIndex) else index
    stats = DefectStats()
    for record in records:
        accumulate_mask_stats(stats, record.mask)
    return stats


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W) float32, normalised
    masks: torch.Tensor  # (B, H, W) int64
    image_ids: list[str]


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear (antialiased) resize of an ``(H, W, C)`` array; returns float32 in the input's value range."""
    if image.shape[:2] == (height, width):
        return image.astype(np.float32)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy()


def to_tensor(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    """``(H, W, 3)`` 0..255 pixels to a normalised ``(3, H, W)`` float tensor."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1) / 255.0
    m = torch.tensor(mean, dtype=torch.float32)[:, None, None]
    s = torch.tensor(std, dtype=torch.float32)[:, None, None]
    return (t - m) / s


def prepare_sample(image, mask, target_size, mean, std):
    h, w = target_size
    image = resize_image(image, h, w)
    mask = resize_mask(mask, h, w)
    return to_tensor(image, mean, std), torch.from_numpy(mask.astype(np.int64))


def iterate_batches(
    records: DatasetIndex | Sequence[SampleRecord],
    split: str | None = None,
    batch_size: int = 16,
    target_size: tuple[int, int] = (256, 256),
    shuffle_seed: int | None = None,
    mean: Sequence[float] = (0.485, 0.456, 0.406),
    std: Sequence[float] = (0.229, 0.224, 0.225),
    augment=None,
) -> Iterator[Batch]:
    """Stream resized, normalised batches; the final partial batch is kept.

    ``augment`` is an optional callable ``(record) -> (image, mask)`` applied
    to raw pixels before resizing.
    """
    if isinstance(records, DatasetIndex):
        records = records.split(split) if split else list(records.records)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(records))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
    images, masks, ids = [], [], []
    for i in order:
        record = records[i]
        try:
            if augment is not None:
                image, mask = augment(record)
            else:
                image, mask = record.load_image(), record.mask
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", record.image_id, exc)
            continue
        x, y = prepare_sample(image, mask, target_size, mean, std)
        images.append(x)
        masks.append(y)
        ids.append(record.image_id)
        if len(images) == batch_size:
            yield Batch(torch.stack(images), torch.stack(masks), ids)
            images, masks, ids = [], [], []
    if images:
        yield Batch(torch.stack(images), torch.stack(masks), ids)
