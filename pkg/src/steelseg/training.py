"""Optimisation loop, checkpoints and loss logging."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import re
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import Batch, SampleRecord, iterate_batches
from .evaluation import EvalReport, IoUAccumulator
from .model import ModelConfig, predict_padded

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOSS_CSV = "loss.csv"
_CKPT_RE = re.compile(r"ckpt_epoch(\d+)\.pt$")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 30
    lr_schedule: str = "constant"  # or "poly"
    poly_power: float = 0.9
    seed: int = 0
    checkpoint_every: int = 1
    eval_every: int = 1
    image_size: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lr_schedule not in ("constant", "poly"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.image_size = tuple(int(s) for s in self.image_size)

    def lr_at(self, step: int, total_steps: int | None) -> float:
        if self.lr_schedule == "constant" or not total_steps:
            return self.learning_rate
        return self.learning_rate * max(0.0, 1.0 - step / total_steps) ** self.poly_power

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LossRecord:
    step: int
    epoch: int
    train_loss: float
    eval_miou: float | None = None
    timestamp: float = 0.0


@dataclass
class TrainState:
    model: nn.Module
    optimizer: torch.optim.Optimizer
    epoch: int = 0  # completed epochs
    step: int = 0
    best_miou: float | None = None


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        model.parameters(), lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )


def compute_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise cross-entropy, ``logits (B, K, H, W)`` vs ``target (B, H, W)``."""
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} do not align")
    num_classes = logits.shape[1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_classes):
        raise ValueError(f"target labels must lie in 0..{num_classes - 1}")
    return F.cross_entropy(logits, target.long())


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train_epoch(
    state: TrainState, batches: Iterable[Batch], config: TrainConfig, total_steps: int | None = None
) -> tuple[TrainState, list[LossRecord]]:
    """One pass over ``batches``; ``state`` is updated in place and returned."""
    model, opt = state.model, state.optimizer
    model.train()
    records = []
    for batch in batches:
        lr = config.lr_at(state.step, total_steps)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss = compute_loss(model(batch.images), batch.masks)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss {loss.item()} at step {state.step} (lr={lr}); batch ids: {batch.image_ids}"
            )
        loss.backward()
        opt.step()
        state.step += 1
        records.append(LossRecord(state.step, state.epoch, float(loss.item()), timestamp=time.time()))
    state.epoch += 1
    return state, records


@torch.no_grad()
def evaluate_split(model: nn.Module, batches: Iterable[Batch], num_classes: int | None = None) -> EvalReport:
    was_training = model.training
    model.eval()
    if num_classes is None:
        num_classes = getattr(getattr(model, "config", None), "num_classes", 5)
    acc = IoUAccumulator(num_classes)
    try:
        for batch in batches:
            preds = predict_padded(model, batch.images).argmax(dim=1).cpu().numpy()
            for pred, truth, image_id in zip(preds, batch.masks.numpy(), batch.image_ids):
                acc.add(pred, truth, image_id)
    finally:
        model.train(was_training)
    if not acc.per_sample:
        raise ValueError("cannot evaluate an empty split")
    return acc.report()


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointState:
    model_config: dict
    model_state: dict
    optimizer_state: dict
    epoch: int
    step: int
    best_miou: float | None
    rng_state: dict
    train_config: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def capture(cls, state: TrainState, model_config: ModelConfig, train_config: TrainConfig | None = None):
        return cls(
            model_config=model_config.to_dict(),
            model_state=state.model.state_dict(),
            optimizer_state=state.optimizer.state_dict(),
            epoch=state.epoch,
            step=state.step,
            best_miou=state.best_miou,
            rng_state={"torch": torch.get_rng_state()},
            train_config=train_config.to_dict() if train_config else {},
        )

    def restore(self, state: TrainState) -> TrainState:
        state.model.load_state_dict(self.model_state)
        state.optimizer.load_state_dict(self.optimizer_state)
        state.epoch, state.step, state.best_miou = self.epoch, self.step, self.best_miou
        torch.set_rng_state(self.rng_state["torch"])
        return state


def save_checkpoint(ckpt: CheckpointState, path: str | Path) -> Path:
    """Write atomically (temp file, then rename); bytes do not depend on ``path``."""
    path = Path(path)
    buf = io.BytesIO()
    torch.save(asdict(ckpt), buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> CheckpointState:
    raw = torch.load(path, map_location="cpu", weights_only=False)
    version = raw.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {version}, this build reads {CHECKPOINT_FORMAT_VERSION}")
    ckpt = CheckpointState(**raw)
    if expected is not None:
        stored = ModelConfig.from_dict(ckpt.model_config)
        if stored != expected:
            diffs = [
                f"{k}: checkpoint {v!r} vs config {getattr(expected, k)!r}"
                for k, v in asdict(stored).items()
                if v != getattr(expected, k)
            ]
            raise CheckpointError(f"{path}: model config mismatch ({'; '.join(diffs)})")
    return ckpt


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    found = [(int(m.group(1)), p) for p in Path(run_dir).glob("ckpt_epoch*.pt") if (m := _CKPT_RE.search(p.name))]
    return max(found)[1] if found else None


# --------------------------------------------------------------------------
# run loop


def append_loss_records(path: Path, records: Sequence[LossRecord]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "epoch", "train_loss", "eval_miou", "timestamp"])
        for r in records:
            writer.writerow([r.step, r.epoch, repr(r.train_loss), "" if r.eval_miou is None else repr(r.eval_miou), r.timestamp])


def read_loss_records(path: str | Path) -> list[LossRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                LossRecord(
                    int(row["step"]), int(row["epoch"]), float(row["train_loss"]),
                    float(row["eval_miou"]) if row["eval_miou"] else None, float(row["timestamp"]),
                )
            )
    return out


@dataclass
class FitResult:
    state: TrainState
    records: list[LossRecord]
    eval_report: EvalReport | None


def fit(
    model: nn.Module,
    model_config: ModelConfig,
    train_records: Sequence[SampleRecord],
    config: TrainConfig,
    run_dir: str | Path | None = None,
    eval_records: Sequence[SampleRecord] | None = None,
    policy=None,
    resume: bool = False,
) -> FitResult:
    """Train for ``config.epochs`` epochs, checkpointing into ``run_dir``.

    Each epoch's shuffle order, augmentation stream and torch RNG are derived
    from ``(config.seed, epoch)``; resuming from an epoch checkpoint therefore
    replays the uninterrupted run exactly.
    """
    from .augment import maybe_augment

    spec = model_config.backbone_spec
    state = TrainState(model, make_optimizer(model, config))
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        path = latest_checkpoint(run_dir) if run_dir is not None else None
        if path is None:
            raise CheckpointError(f"no checkpoint to resume from in {run_dir}")
        load_checkpoint(path, expected=model_config).restore(state)
        log.info("resumed from %s at epoch %d, step %d", path.name, state.epoch, state.step)

    steps_per_epoch = math.ceil(len(train_records) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    all_records: list[LossRecord] = []
    report = None
    while state.epoch < config.epochs:
        epoch = state.epoch
        torch.manual_seed(epoch_seed(config.seed, epoch))
        augment = None
        if policy is not None:
            rng = policy.make_rng(epoch=epoch)

            def augment(record, rng=rng):
                out = maybe_augment(record, policy, rng)
                if out.applied_actions:
                    log.debug("augment %s %s", record.image_id, out.applied_actions)
                return out.image, out.mask

        batches = iterate_batches(
            train_records, batch_size=config.batch_size, target_size=config.image_size,
            shuffle_seed=epoch_seed(config.seed, epoch), mean=spec.mean, std=spec.std, augment=augment,
        )
        _, records = train_epoch(state, batches, config, total_steps)
        done = state.epoch
        if eval_records and (done % config.eval_every == 0 or done == config.epochs):
            report = evaluate_split(
                model,
                iterate_batches(eval_records, batch_size=config.batch_size, target_size=config.image_size,
                                mean=spec.mean, std=spec.std),
            )
            records[-1].eval_miou = report.mean_iou
            if state.best_miou is None or report.mean_iou > state.best_miou:
                state.best_miou = report.mean_iou
                if run_dir is not None:
                    save_checkpoint(CheckpointState.capture(state, model_config, config), run_dir / "best.pt")
        all_records.extend(records)
        if run_dir is not None:
            append_loss_records(run_dir / LOSS_CSV, records)
            if done % config.checkpoint_every == 0 or done == config.epochs:
                save_checkpoint(CheckpointState.capture(state, model_config, config), run_dir / f"ckpt_epoch{done}.pt")
    return FitResult(state, all_records, report)
