"""Class-balanced random augmentation with paired image/mask transforms.

Each defect class ``c`` with region share ``p_c`` is augmented with
probability ``1 - p_c``.  A triggered sample receives exactly one action,
drawn from (random crop, vertical flip, random rotation) with weights ``W``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .dataset import DefectStats, SampleRecord
from .masks import CLASS_IDS

ACTIONS = ("random_crop", "vertical_flip", "random_rotation")


@dataclass(frozen=True)
class AugmentationPolicy:
    class_proportions: tuple[float, float, float, float]
    action_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    rotation_range: float = 15.0
    crop_size: tuple[int, int] = (256, 256)
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.class_proportions) != 4 or any(not 0.0 <= p <= 1.0 for p in self.class_proportions):
            raise ValueError(f"class proportions must be four values in [0, 1], got {self.class_proportions}")
        if len(self.action_weights) != 3 or any(w < 0 for w in self.action_weights):
            raise ValueError(f"action weights must be three non-negative values, got {self.action_weights}")
        if abs(sum(self.action_weights) - 1.0) > 1e-9:
            raise ValueError(f"action weights must sum to 1, got {sum(self.action_weights)!r}")
        if self.rotation_range < 0:
            raise ValueError("rotation_range must be non-negative")

    @property
    def augment_probabilities(self) -> dict[int, float]:
        return {c: 1.0 - p for c, p in zip(CLASS_IDS, self.class_proportions)}

    def trigger_probability(self, classes_present) -> float:
        """Probability for a sample holding ``classes_present``; 0 when defect-free."""
        probs = self.augment_probabilities
        return max((probs[c] for c in classes_present), default=0.0)

    def make_rng(self, worker: int = 0, epoch: int = 0) -> np.random.Generator:
        """Independent, reproducible stream per (epoch, worker)."""
        return np.random.default_rng(np.random.SeedSequence([self.rng_seed, epoch, worker]))

    def to_dict(self) -> dict:
        return {
            "class_proportions": list(self.class_proportions),
            "action_weights": list(self.action_weights),
            "rotation_range": self.rotation_range,
            "crop_size": list(self.crop_size),
            "rng_seed": self.rng_seed,
        }


def derive_policy(
    stats: DefectStats,
    action_weights: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    rotation_range: float = 15.0,
    crop_size: Sequence[int] = (256, 256),
    seed: int = 0,
) -> AugmentationPolicy:
    """Build a policy whose class proportions are the region-count shares of ``stats``."""
    if stats.region_total == 0:
        raise ValueError("cannot derive an augmentation policy from a dataset without defect regions")
    shares = stats.count_shares
    return AugmentationPolicy(
        class_proportions=tuple(shares[c] for c in CLASS_IDS),
        action_weights=tuple(float(w) for w in action_weights),
        rotation_range=float(rotation_range),
        crop_size=tuple(int(s) for s in crop_size),
        rng_seed=seed,
    )


# --------------------------------------------------------------------------
# transforms


def vertical_flip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip top-to-bottom."""
    return image[::-1].copy(), mask[::-1].copy()


def random_rotation(image: np.ndarray, mask: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate both arrays ``angle`` degrees counter-clockwise about the canvas centre.

    The image is resampled bilinearly, the mask by nearest neighbour; uncovered
    canvas becomes 0.  Integer images are rounded back to their dtype.
    """
    if angle == 0:
        return image.copy(), mask.copy()
    rad = math.radians(angle)
    squeeze = image.ndim == 2
    src = image[..., None] if squeeze else image
    rotated = kernels.rotate_bilinear(np.ascontiguousarray(src, dtype=np.float32), rad)
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        rotated = np.clip(np.rint(rotated), info.min, info.max).astype(image.dtype)
    else:
        rotated = rotated.astype(image.dtype, copy=False)
    if squeeze:
        rotated = rotated[..., 0]
    return rotated, kernels.rotate_nearest(np.ascontiguousarray(mask), rad)


def random_crop(
    image: np.ndarray, mask: np.ndarray, target_size: Sequence[int], offset: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Cut a ``target_size`` window at ``offset = (dy, dx)`` from both arrays."""
    th, tw = target_size
    h, w = mask.shape
    check_crop(h, w, th, tw)
    dy, dx = offset
    if not (0 <= dy <= h - th and 0 <= dx <= w - tw):
        raise ValueError(f"crop offset {(dy, dx)} out of range for {th}x{tw} window in {h}x{w}")
    return image[dy : dy + th, dx : dx + tw].copy(), mask[dy : dy + th, dx : dx + tw].copy()


def check_crop(h, w, th, tw):
    if th > h or tw > w:
        raise ValueError(f"crop {th}x{tw} is larger than the {h}x{w} source")


# --------------------------------------------------------------------------
# sampling


@dataclass
class AugmentedSample:
    image: np.ndarray
    mask: np.ndarray
    applied_actions: list[dict] = field(default_factory=list)


def draw_action(policy: AugmentationPolicy, shape: tuple[int, int], rng: np.random.Generator) -> dict:
    """Sample one action and its parameters for a source of the given shape."""
    kind = ACTIONS[rng.choice(3, p=policy.action_weights)]
    if kind == "random_crop":
        th, tw = policy.crop_size
        check_crop(shape[0], shape[1], th, tw)
        dy = int(rng.integers(0, shape[0] - th + 1))
        dx = int(rng.integers(0, shape[1] - tw + 1))
        return {"kind": kind, "size": [th, tw], "offset": [dy, dx]}
    if kind == "random_rotation":
        r = policy.rotation_range
        return {"kind": kind, "angle": float(rng.uniform(-r, r))}
    return {"kind": kind}


def apply_action(image, mask, action: dict):
    kind = action["kind"]
    if kind == "random_crop":
        return random_crop(image, mask, action["size"], action["offset"])
    if kind == "vertical_flip":
        return vertical_flip(image, mask)
    if kind == "random_rotation":
        return random_rotation(image, mask, action["angle"])
    raise ValueError(f"unknown augmentation action {kind!r}")


def replay(image: np.ndarray, mask: np.ndarray, actions: Sequence[dict]) -> AugmentedSample:
    for action in actions:
        image, mask = apply_action(image, mask, action)
    return AugmentedSample(image, mask, list(actions))


def maybe_augment(sample: SampleRecord, policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentedSample:
    """Augment with probability ``max(1 - p_c)`` over the classes present.

    Defect-free samples pass through untouched.
    """
    image, mask = sample.load_image(), sample.mask
    classes = sample.defect_classes_present
    if not classes or rng.random() >= policy.trigger_probability(classes):
        return AugmentedSample(image, mask, [])
    action = draw_action(policy, mask.shape, rng)
    image, mask = apply_action(image, mask, action)
    return AugmentedSample(image, mask, [action])
