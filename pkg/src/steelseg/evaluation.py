"""Per-sample IoU, mean IoU reports, histograms and throughput measurement."""
from __future__ import annotations

import copy
import json
import math
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .model import predict_padded

NUM_CLASSES = 5
MODES = ("train", "eval_resized", "eval_original")


def class_overlap(pred: np.ndarray, truth: np.ndarray, num_classes: int = NUM_CLASSES):
    """Per defect class ``(intersection, union)`` pixel counts, classes 1..num_classes-1."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in size")
    conf = kernels.confusion(
        np.ascontiguousarray(pred, dtype=np.int64), np.ascontiguousarray(truth, dtype=np.int64), num_classes
    )
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    return inter[1:], union[1:]


def sample_iou(pred: np.ndarray, truth: np.ndarray, num_classes: int = NUM_CLASSES) -> float:
    """Mean class IoU over the defect classes present in either mask.

    Two defect-free masks agree perfectly and score 1.
    """
    inter, union = class_overlap(pred, truth, num_classes)
    ious = [int(i) / int(u) for i, u in zip(inter, union) if u > 0]
    if not ious:
        return 1.0
    return sum(ious) / len(ious)


def iou_histogram(values: "EvalReport | Iterable[float]", num_bins: int = 10) -> list[int]:
    """Left-closed equal bins over [0, 1]; the last bin also holds 1.0."""
    if isinstance(values, EvalReport):
        values = [v for _, v in values.per_sample_iou]
    counts = [0] * num_bins
    for v in values:
        counts[min(int(math.floor(v * num_bins)), num_bins - 1)] += 1
    return counts


@dataclass
class EvalReport:
    per_sample_iou: list[tuple[str, float]]
    mean_iou: float
    per_class_iou: dict[int, float | None]
    histogram: list[int]
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "mean_iou": self.mean_iou,
            "per_class_iou": {str(c): v for c, v in self.per_class_iou.items()},
            "histogram": self.histogram,
            "per_sample_iou": [{"image_id": i, "iou": v} for i, v in self.per_sample_iou],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_per_sample_csv(self, path: str | Path) -> None:
        """Lowest IoU first, for triaging poor predictions."""
        rows = sorted(self.per_sample_iou, key=lambda r: (r[1], r[0]))
        with open(path, "w") as fh:
            fh.write("image_id,iou\n")
            for image_id, iou in rows:
                fh.write(f"{image_id},{iou!r}\n")


class IoUAccumulator:
    """Streaming version of :func:`mean_iou`."""

    def __init__(self, num_classes: int = NUM_CLASSES):
        self.num_classes = num_classes
        self.per_sample: list[tuple[str, float]] = []
        self.inter = np.zeros(num_classes - 1, dtype=np.int64)
        self.union = np.zeros(num_classes - 1, dtype=np.int64)

    def add(self, pred, truth, image_id: str | None = None) -> float:
        inter, union = class_overlap(pred, truth, self.num_classes)
        self.inter += inter
        self.union += union
        ious = [int(i) / int(u) for i, u in zip(inter, union) if u > 0]
        iou = sum(ious) / len(ious) if ious else 1.0
        self.per_sample.append((image_id if image_id is not None else str(len(self.per_sample)), iou))
        return iou

    def report(self, num_bins: int = 10) -> EvalReport:
        if not self.per_sample:
            raise ValueError("no samples evaluated")
        values = [v for _, v in self.per_sample]
        per_class = {
            c + 1: (int(self.inter[c]) / int(self.union[c]) if self.union[c] else None)
            for c in range(self.num_classes - 1)
        }
        return EvalReport(
            per_sample_iou=list(self.per_sample),
            mean_iou=sum(values) / len(values),
            per_class_iou=per_class,
            histogram=iou_histogram(values, num_bins),
            sample_count=len(values),
        )


def mean_iou(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    image_ids: Sequence[str] | None = None,
    num_classes: int = NUM_CLASSES,
    num_bins: int = 10,
) -> EvalReport:
    """Evaluate ``(pred, truth)`` pairs; per-class IoU pools pixels over all samples."""
    if not len(pairs):
        raise ValueError("mean_iou needs at least one (pred, truth) pair")
    acc = IoUAccumulator(num_classes)
    for k, (pred, truth) in enumerate(pairs):
        acc.add(pred, truth, image_ids[k] if image_ids is not None else None)
    return acc.report(num_bins)


@torch.no_grad()
def predict_masks(model: torch.nn.Module, images: torch.Tensor) -> np.ndarray:
    """Argmax labels ``(B, H, W)`` as uint8; any input size."""
    return predict_padded(model, images).argmax(dim=1).to(torch.uint8).cpu().numpy()


# --------------------------------------------------------------------------
# throughput


@dataclass
class RateMeasurement:
    rate: float
    std: float
    units: int
    rounds: int
    batch_size: int
    input_size: tuple[int, int]
    short: bool = False


@dataclass
class ThroughputReport:
    backbone: str
    hardware: str
    train: RateMeasurement | None = None
    eval_resized: RateMeasurement | None = None
    eval_original: RateMeasurement | None = None
    warmup: int = 0

    @property
    def train_iters_per_sec(self) -> float | None:
        return self.train.rate if self.train else None

    @property
    def eval_resized_images_per_sec(self) -> float | None:
        return self.eval_resized.rate if self.eval_resized else None

    @property
    def eval_original_images_per_sec(self) -> float | None:
        return self.eval_original.rate if self.eval_original else None

    @property
    def batch_sizes(self) -> dict[str, int]:
        return {m: getattr(self, m).batch_size for m in MODES if getattr(self, m) is not None}

    def to_dict(self) -> dict:
        return asdict(self) | {"batch_sizes": self.batch_sizes}


TABLE_HEADER = ("Model backbone", "Train(iter/s)", "Eval Resized Image(image/s)", "Eval Original Image(image/s)")


def format_throughput_table(reports: Sequence[ThroughputReport]) -> str:
    def cell(m):
        return "-" if m is None else f"{m.rate:.2f}"

    rows = [TABLE_HEADER] + [(r.backbone, cell(r.train), cell(r.eval_resized), cell(r.eval_original)) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = [" | ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def hardware_descriptor() -> str:
    if torch.cuda.is_available():
        device = torch.cuda.get_device_name(0)
    else:
        device = f"cpu ({platform.processor() or platform.machine()}, {torch.get_num_threads()} threads)"
    return f"{device}; torch {torch.__version__}; {platform.system()} {platform.release()}"


def _time_rounds(step, units, rounds):
    rates = []
    for _ in range(rounds):
        start = time.perf_counter()
        for i in range(units):
            step(i)
        rates.append(units / (time.perf_counter() - start))
    return statistics.fmean(rates), (statistics.stdev(rates) if len(rates) > 1 else 0.0)


def speed_benchmark(
    model: torch.nn.Module,
    modes: Sequence[str] = MODES,
    images: Sequence[torch.Tensor] | None = None,
    backbone: str | None = None,
    units: int = 30,
    warmup: int = 3,
    rounds: int = 3,
    train_batch: int = 16,
    resized_size: tuple[int, int] = (256, 256),
    original_size: tuple[int, int] = (256, 1700),
    learning_rate: float = 0.01,
    weight_decay: float = 1e-4,
    seed: int = 0,
) -> ThroughputReport:
    """Measure training iterations/s (batch ``train_batch``) and inference images/s (batch 1).

    ``images`` optionally supplies real ``(3, H, W)`` inputs for the eval modes;
    if fewer than ``units`` are given, only those are timed and the
    measurement is flagged ``short``.  Training runs on a copy of ``model``.
    """
    unknown = set(modes) - set(MODES)
    if unknown:
        raise ValueError(f"unknown benchmark modes {sorted(unknown)}")
    if backbone is None:
        backbone = getattr(getattr(model, "config", None), "backbone", type(model).__name__)
    gen = torch.Generator().manual_seed(seed)
    report = ThroughputReport(backbone=backbone, hardware=hardware_descriptor(), warmup=warmup)
    param = next(model.parameters())
    device, dtype = param.device, param.dtype
    num_classes = getattr(getattr(model, "config", None), "num_classes", NUM_CLASSES)

    if "train" in modes:
        net = copy.deepcopy(model).train()
        opt = torch.optim.SGD(net.parameters(), lr=learning_rate, momentum=0.9, weight_decay=weight_decay)
        x = torch.randn(train_batch, 3, *resized_size, generator=gen).to(device, dtype)
        y = torch.randint(0, num_classes, (train_batch, *resized_size), generator=gen).to(device)

        def train_step(_):
            opt.zero_grad(set_to_none=True)
            F.cross_entropy(net(x), y).backward()
            opt.step()

        for i in range(warmup):
            train_step(i)
        rate, std = _time_rounds(train_step, units, rounds)
        report.train = RateMeasurement(rate, std, units, rounds, train_batch, tuple(resized_size))

    was_training = model.training
    model.eval()
    try:
        for mode, size in (("eval_resized", resized_size), ("eval_original", original_size)):
            if mode not in modes:
                continue
            if images is not None:
                inputs = [
                    F.interpolate(im[None].to(device, dtype), size=size, mode="bilinear", align_corners=False)
                    for im in images[:units]
                ]
            else:
                inputs = [torch.randn(1, 3, *size, generator=gen).to(device, dtype) for _ in range(min(units, 4))]
            n = min(units, len(images)) if images is not None else units
            if n == 0:
                raise ValueError("no images available to benchmark")

            def eval_step(i, inputs=inputs):
                with torch.no_grad():
                    predict_padded(model, inputs[i % len(inputs)])

            for i in range(warmup):
                eval_step(i)
            rate, std = _time_rounds(eval_step, n, rounds)
            setattr(report, mode, RateMeasurement(rate, std, n, rounds, 1, tuple(size), short=n < units))
    finally:
        model.train(was_training)
    return report
