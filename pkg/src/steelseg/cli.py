"""``steelseg`` command line: stats, train, eval, infer, benchmark.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, DataConfig, RunConfig, load_config
from .dataset import compute_stats, iterate_batches, load_annotations, split_dataset, to_tensor, resize_image
from .masks import CLASS_IDS

log = logging.getLogger("steelseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

#: overlay colour per defect class
PALETTE = {1: (230, 25, 75), 2: (60, 180, 75), 3: (0, 130, 200), 4: (255, 225, 25)}


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def _load_index(data: DataConfig):
    csv_path, image_dir = data.csv_path, data.image_path
    if not csv_path.is_file():
        raise DataError(f"annotation CSV not found: {csv_path}")
    if not image_dir.is_dir():
        raise DataError(f"image directory not found: {image_dir}")
    index = load_annotations(csv_path, image_dir)
    if not index.records:
        raise DataError(f"no readable images in {image_dir}")
    return index


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    out = image.astype(np.float32).copy()
    for c, colour in PALETTE.items():
        sel = mask == c
        out[sel] = (1 - alpha) * out[sel] + alpha * np.asarray(colour, dtype=np.float32)
    return out.clip(0, 255).astype(np.uint8)


def _plot_histogram(report, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    bins = len(report.histogram)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([(i + 0.5) / bins for i in range(bins)], report.histogram, width=1 / bins, edgecolor="black")
    ax.set_xlabel("IoU")
    ax.set_ylabel("images")
    ax.set_title(f"{title} (mIoU {report.mean_iou:.3f})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_loss(records, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    a.plot([r.step for r in records], [r.train_loss for r in records])
    a.set_xlabel("step")
    a.set_ylabel("train loss")
    evals = [(r.step, r.eval_miou) for r in records if r.eval_miou is not None]
    if evals:
        b.plot(*zip(*evals), marker="o")
    b.set_xlabel("step")
    b.set_ylabel("eval mIoU")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _model_from_checkpoint(path, expected=None):
    from .model import ModelConfig, build_model
    from .training import load_checkpoint

    ckpt = load_checkpoint(path, expected=expected)
    mc = ModelConfig.from_dict(ckpt.model_config)
    model = build_model(mc)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, mc, ckpt


# --------------------------------------------------------------------------
# subcommands


def cmd_stats(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.data_dir:
        cfg.data.data_dir = args.data_dir
    if args.csv:
        cfg.data.csv = args.csv
    if args.images:
        cfg.data.image_dir = args.images
    index = _load_index(cfg.data)
    stats = compute_stats(index)
    print(stats.format_table())
    payload = stats.to_dict() | {"load_issues": [{"image_id": i.image_id, "reason": i.reason} for i in index.issues]}
    if args.json:
        _write_json(Path(args.json), payload)
    return EXIT_OK


def _prepare_run(cfg: RunConfig):
    from .augment import derive_policy

    index = split_dataset(_load_index(cfg.data), cfg.data.split_ratios, cfg.data.split_seed)
    train = index.split("train")
    if not train:
        raise DataError("train split is empty")
    policy = None
    if cfg.augmentation.enabled:
        stats = compute_stats(train)
        if stats.region_total:
            a = cfg.augmentation
            policy = derive_policy(stats, a.action_weights, a.rotation_range, a.crop_size, a.seed)
        else:
            log.warning("train split has no defect regions; augmentation disabled")
    return index, train, policy


def cmd_train(args) -> int:
    from .model import build_model
    from .training import fit

    cfg = load_config(args.config, args.set)
    if args.run_dir:
        cfg.run_dir = args.run_dir
    run_dir = Path(cfg.run_dir)
    index, train, policy = _prepare_run(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(cfg.dumps())
    if policy is not None:
        _write_json(run_dir / "policy.json", policy.to_dict())
    model = build_model(cfg.model, pretrained=cfg.pretrained, seed=cfg.train.seed)
    result = fit(
        model, cfg.model, train, cfg.train, run_dir=run_dir,
        eval_records=index.split("eval") or None, policy=policy, resume=args.resume,
    )
    if result.eval_report is not None:
        result.eval_report.save(run_dir / "eval_report.json")
        print(f"eval mIoU {result.eval_report.mean_iou:.4f} over {result.eval_report.sample_count} images")
    from .training import LOSS_CSV, read_loss_records

    records = read_loss_records(run_dir / LOSS_CSV)
    if records:
        _plot_loss(records, run_dir / "loss_curve.png")
        print(f"step {records[-1].step}: train loss {records[-1].train_loss:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .training import evaluate_split

    cfg = load_config(args.config, args.set)
    if args.data_dir:
        cfg.data.data_dir = args.data_dir
    # the config's [model] is checked against the checkpoint only when a config was given
    model, mc, ckpt = _model_from_checkpoint(args.checkpoint, expected=cfg.model if args.config else None)
    index = split_dataset(_load_index(cfg.data), cfg.data.split_ratios, cfg.data.split_seed)
    records = index.split(args.split)
    if not records:
        raise DataError(f"split {args.split!r} is empty")
    size = tuple(ckpt.train_config.get("image_size", cfg.train.image_size))
    spec = mc.backbone_spec
    report = evaluate_split(model, iterate_batches(records, batch_size=args.batch_size, target_size=size,
                                                    mean=spec.mean, std=spec.std))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "eval_report.json")
    report.write_per_sample_csv(out / "per_sample_iou.csv")
    _plot_histogram(report, out / "iou_histogram.png", f"{mc.backbone} {mc.variant}")
    print(f"{args.split}: mIoU {report.mean_iou:.4f} over {report.sample_count} images")
    return EXIT_OK


def cmd_infer(args) -> int:
    from PIL import Image

    from .evaluation import predict_masks

    model, mc, ckpt = _model_from_checkpoint(args.checkpoint)
    spec = mc.backbone_spec
    size = tuple(ckpt.train_config.get("image_size", (256, 256)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, failures = [], []
    for path in map(Path, args.images):
        try:
            with Image.open(path) as im:
                image = np.asarray(im.convert("RGB"))
        except OSError as exc:
            log.warning("skipping %s: %s", path, exc)
            failures.append({"image": str(path), "reason": str(exc)})
            continue
        shown = image if args.original_size else resize_image(image, *size).round().clip(0, 255).astype(np.uint8)
        mask = predict_masks(model, to_tensor(shown, spec.mean, spec.std)[None])[0]
        Image.fromarray(mask).save(out / f"{path.stem}_mask.png")
        Image.fromarray(overlay(shown, mask)).save(out / f"{path.stem}_overlay.png")
        results.append({
            "image_id": path.name,
            "height": int(mask.shape[0]),
            "width": int(mask.shape[1]),
            "pixel_counts": {str(c): int((mask == c).sum()) for c in CLASS_IDS},
        })
    _write_json(out / "inference.json", {"results": results, "failures": failures})
    for r in results:
        print(f"{r['image_id']}: {r['height']}x{r['width']} {r['pixel_counts']}")
    return EXIT_OK if results or not failures else EXIT_DATA


def cmd_benchmark(args) -> int:
    from dataclasses import replace

    from .evaluation import format_throughput_table, speed_benchmark
    from .model import build_model

    if args.checkpoint:
        model, _, _ = _model_from_checkpoint(args.checkpoint)
        targets = [model]
    else:
        cfg = load_config(args.config, args.set)
        names = args.backbones or [cfg.model.backbone]
        targets = [build_model(replace(cfg.model, backbone=n), pretrained=cfg.pretrained, seed=0) for n in names]
        if args.baseline:
            targets.insert(0, build_model(replace(cfg.model, backbone=names[0], variant="baseline"), seed=0))
    reports = []
    for model in targets:
        label = model.config.backbone if model.config.variant != "baseline" else f"Base ({model.config.backbone})"
        reports.append(speed_benchmark(
            model, modes=args.modes, backbone=label, units=args.units, warmup=args.warmup, rounds=args.rounds,
            train_batch=args.train_batch, resized_size=tuple(args.resized_size), original_size=tuple(args.original_size),
        ))
    print(format_throughput_table(reports))
    print(f"hardware: {reports[0].hardware}")
    if args.json:
        _write_json(Path(args.json), [r.to_dict() for r in reports])
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steelseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="run config (TOML)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")

    p = sub.add_parser("stats", help="class imbalance and fragmentation statistics")
    common(p)
    p.add_argument("--data-dir")
    p.add_argument("--csv", help="annotation CSV (default <data-dir>/train.csv)")
    p.add_argument("--images", help="image directory (default <data-dir>/train_images)")
    p.add_argument("--json", help="write the stats report here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    common(p, config_required=True)
    p.add_argument("--run-dir")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the run dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "eval", "test"])
    p.add_argument("--data-dir")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict masks for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--original-size", action="store_true", help="predict at the image's native size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("benchmark", help="training / inference throughput")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--backbones", nargs="+")
    p.add_argument("--baseline", action="store_true", help="also time the baseline variant")
    p.add_argument("--modes", nargs="+", default=["train", "eval_resized", "eval_original"],
                   choices=["train", "eval_resized", "eval_original"])
    p.add_argument("--units", type=int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--train-batch", type=int, default=16)
    p.add_argument("--resized-size", type=int, nargs=2, default=[256, 256], metavar=("H", "W"))
    p.add_argument("--original-size", type=int, nargs=2, default=[256, 1700], metavar=("H", "W"))
    p.add_argument("--json")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    from .training import CheckpointError

    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"steelseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"steelseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, ValueError) as exc:
        print(f"steelseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
