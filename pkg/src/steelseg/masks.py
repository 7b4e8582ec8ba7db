"""Run-length annotations and labelled masks.

Run-length strings follow the Severstal ``EncodedPixels`` convention: space
separated ``start length`` pairs, 1-based starts, pixels numbered down the
first column, then the second column and so on (column-major).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import kernels

NUM_DEFECT_CLASSES = 4
CLASS_IDS = (1, 2, 3, 4)

#: A labelled mask is a plain ``(H, W)`` uint8 array with values in 0..4.
LabelMask = np.ndarray


class RleValidationError(ValueError):
    """Runs are unsorted, overlapping, or otherwise malformed."""


class RleDecodeError(ValueError):
    """Runs do not fit in the target image."""


@dataclass(frozen=True)
class RlePayload:
    """Ordered ``(start, length)`` runs; ``start`` is 1-based, column-major."""

    runs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        prev_end = 1
        for start, length in self.runs:
            if start < 1 or length < 1:
                raise RleValidationError(f"invalid run ({start}, {length}): starts are 1-based, lengths positive")
            if start < prev_end:
                raise RleValidationError(f"run starting at {start} overlaps or precedes the previous run")
            prev_end = start + length

    @classmethod
    def from_array(cls, runs: np.ndarray) -> "RlePayload":
        return cls(tuple((int(s), int(n)) for s, n in np.asarray(runs).reshape(-1, 2)))

    @classmethod
    def from_text(cls, text: str | None) -> "RlePayload":
        """Parse ``"s1 l1 s2 l2 ..."``; ``None``/blank/NaN gives an empty payload."""
        if text is None:
            return cls()
        if isinstance(text, float):  # pandas NaN for empty cells
            return cls()
        text = str(text).strip()
        if not text or text.lower() == "nan":
            return cls()
        try:
            values = [int(tok) for tok in text.split()]
        except ValueError as exc:
            raise RleValidationError(f"non-integer token in RLE string: {exc}") from None
        if len(values) % 2:
            raise RleValidationError("RLE string has an odd number of integers")
        return cls(tuple(zip(values[0::2], values[1::2])))

    def to_text(self) -> str:
        return " ".join(f"{s} {n}" for s, n in self.runs)

    @property
    def area(self) -> int:
        return sum(n for _, n in self.runs)

    def __len__(self) -> int:
        return len(self.runs)


def rle_decode(payload: RlePayload | str, height: int, width: int) -> np.ndarray:
    """Decode runs into a binary ``(height, width)`` uint8 mask."""
    if height <= 0 or width <= 0:
        raise ValueError(f"mask dimensions must be positive, got {height}x{width}")
    if not isinstance(payload, RlePayload):
        payload = RlePayload.from_text(payload)
    size = height * width
    if not payload.runs:
        return np.zeros((height, width), dtype=np.uint8)
    runs = np.asarray(payload.runs, dtype=np.int64)
    last_end = runs[-1, 0] + runs[-1, 1] - 1
    if last_end > size:
        raise RleDecodeError(f"run ends at pixel {last_end}, beyond the {height}x{width} image ({size} pixels)")
    flat = kernels.decode_runs(runs[:, 0].copy(), runs[:, 1].copy(), size)
    return flat.reshape(width, height).T.copy()


def rle_encode(mask: np.ndarray) -> RlePayload:
    """Encode a binary mask into canonical maximal runs."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {mask.shape}")
    flat = np.ascontiguousarray(mask.T).ravel().astype(np.uint8)
    return RlePayload.from_array(kernels.encode_runs(flat))


def compose_label_mask(per_class: Mapping[int, np.ndarray], height: int, width: int) -> LabelMask:
    """Merge per-class binary masks into one labelled mask.

    Where classes overlap the highest class id wins.
    """
    labels = np.zeros((height, width), dtype=np.uint8)
    for class_id in sorted(per_class):
        if class_id not in CLASS_IDS:
            raise ValueError(f"class id must be one of {CLASS_IDS}, got {class_id}")
        binary = np.asarray(per_class[class_id])
        if binary.shape != (height, width):
            raise ValueError(f"class {class_id} mask has shape {binary.shape}, expected {(height, width)}")
        labels[binary != 0] = class_id
    return labels


def validate_label_mask(mask: np.ndarray, num_classes: int = NUM_DEFECT_CLASSES) -> None:
    if mask.ndim != 2:
        raise ValueError(f"label mask must be 2D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > num_classes):
        raise ValueError(f"label values must lie in 0..{num_classes}")


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index for each of ``dst`` output positions under nearest-neighbour."""
    idx = np.floor((np.arange(dst) + 0.5) * (src / dst)).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resize_mask(mask: LabelMask, new_height: int, new_width: int) -> LabelMask:
    """Nearest-neighbour resize; never produces labels absent from the input."""
    if new_height <= 0 or new_width <= 0:
        raise ValueError(f"target dimensions must be positive, got {new_height}x{new_width}")
    h, w = mask.shape
    if (h, w) == (new_height, new_width):
        return mask.copy()
    rows = nearest_indices(h, new_height)
    cols = nearest_indices(w, new_width)
    return mask[rows[:, None], cols[None, :]]


def masks_from_rles(rles: Mapping[int, str | RlePayload], height: int, width: int) -> LabelMask:
    """Decode a ``{class_id: rle}`` mapping straight into a labelled mask."""
    per_class = {c: rle_decode(r, height, width) for c, r in rles.items()}
    return compose_label_mask(per_class, height, width)


def label_mask_to_rles(mask: LabelMask) -> dict[int, RlePayload]:
    """Split a labelled mask into non-empty per-class payloads."""
    out = {}
    for class_id in CLASS_IDS:
        payload = rle_encode(mask == class_id)
        if payload.runs:
            out[class_id] = payload
    return out
