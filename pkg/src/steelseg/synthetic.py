"""Synthetic steel-like images with geometric defects, for fixtures and smoke runs."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import SampleRecord
from .masks import CLASS_IDS, label_mask_to_rles

# grey level painted into each defect class
CLASS_INTENSITY = {1: 230, 2: 20, 3: 175, 4: 65}


def make_image(rng: np.random.Generator, height: int, width: int, classes=CLASS_IDS):
    """One image with one axis-aligned defect per requested class, in separate horizontal cells."""
    base = rng.normal(110, 6, size=(height, width)).clip(0, 255)
    mask = np.zeros((height, width), dtype=np.uint8)
    classes = list(classes)
    if classes:
        cell_w = width // len(classes)
        for k, c in enumerate(classes):
            x0, x1 = k * cell_w, (k + 1) * cell_w
            dh = int(rng.integers(height // 3, height // 2 + 1))
            dw = int(rng.integers(cell_w // 2, cell_w - 2))
            top = int(rng.integers(0, height - dh + 1))
            left = x0 + int(rng.integers(1, x1 - x0 - dw))
            mask[top : top + dh, left : left + dw] = c
            base[top : top + dh, left : left + dw] = CLASS_INTENSITY[c] + rng.normal(0, 4, size=(dh, dw))
    gray = base.clip(0, 255).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=2), mask


def make_records(n: int, height: int = 64, width: int = 64, seed: int = 0, defect_free: int = 0):
    """``n`` in-memory samples; the first ``defect_free`` have no defects, the rest cycle class subsets."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        if i < defect_free:
            classes = []
        else:
            k = i - defect_free
            classes = [c for c in CLASS_IDS if (k + c) % 3 != 0] or [1 + k % 4]
        image, mask = make_image(rng, height, width, classes)
        records.append(SampleRecord.from_arrays(f"syn_{i:04d}.png", image, mask))
    return records


def write_corpus(directory: str | Path, records, csv_name: str = "train.csv") -> Path:
    """Write images as PNG and annotations as a Severstal-style CSV."""
    directory = Path(directory)
    image_dir = directory / "train_images"
    image_dir.mkdir(parents=True, exist_ok=True)
    csv_path = directory / csv_name
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ImageId", "ClassId", "EncodedPixels"])
        for r in records:
            Image.fromarray(r.load_image()).save(image_dir / r.image_id)
            for class_id, payload in label_mask_to_rles(r.mask).items():
                writer.writerow([r.image_id, class_id, payload.to_text()])
    return csv_path
