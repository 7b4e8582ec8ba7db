"""Acceptance suite: one verdict line per criterion, printed straight to the terminal.

Run alone with ``pytest tests/test_acceptance.py -v``.  Criterion 9 needs the
full Severstal training set; point ``STEELSEG_DATA_ROOT`` at the directory
holding ``train.csv`` and ``train_images/`` or it is reported as SKIP.
"""
import json
import math
import os
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from steelseg.augment import AugmentationPolicy, draw_action, apply_action, maybe_augment, random_rotation, vertical_flip
from steelseg.cli import main
from steelseg.dataset import SampleRecord, iterate_batches
from steelseg.evaluation import sample_iou
from steelseg.masks import RlePayload, rle_decode, rle_encode
from steelseg.model import REGISTRY, ModelConfig, ShapeError, build_model, predict_padded
from steelseg.synthetic import make_records
from steelseg.training import TrainConfig, evaluate_split, fit

from oracles import scan_encode, set_iou

REFERENCE_P = (0.0348, 0.126, 0.73, 0.113)
DATA_CANDIDATES = ("~/data/severstal", "/data/severstal", "/data/severstal-steel-defect-detection")


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(number, title):
        notes = []
        start = time.perf_counter()
        try:
            yield notes
        except pytest.skip.Exception as exc:
            _emit(capsys, f"criterion {number:>2} SKIP  {title}: {exc.msg}")
            raise
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _emit(capsys, f"criterion {number:>2} FAIL  {title}: {reason}")
            raise
        else:
            extra = "; ".join(notes)
            _emit(capsys, f"criterion {number:>2} PASS  {title} ({extra}; {time.perf_counter() - start:.1f}s)")

    return run


def _emit(capsys, line):
    with capsys.disabled():
        print(f"\n[acceptance] {line}")


# 1 ------------------------------------------------------------------------


def test_c01_rle_round_trip(criterion):
    with criterion(1, "RLE round-trip") as notes:
        gen = np.random.default_rng(101)
        masks = []
        for k in range(1000):
            h, w = (int(v) for v in gen.integers(1, 65, size=2))
            if k == 0:
                m = np.zeros((h, w), np.uint8)
            elif k == 1:
                m = np.ones((h, w), np.uint8)
            else:
                m = (gen.random((h, w)) < gen.random()).astype(np.uint8)
            masks.append(m)
        start = time.perf_counter()
        for m in masks:
            payload = rle_encode(m)
            back = rle_decode(RlePayload.from_text(payload.to_text()), *m.shape)
            assert np.array_equal(back, m), f"round-trip mismatch on a {m.shape} mask"
        elapsed = time.perf_counter() - start
        for m in masks[::10]:
            assert [tuple(int(v) for v in r) for r in rle_encode(m).runs] == scan_encode(m.tolist())
        assert elapsed < 10, f"round-trip took {elapsed:.2f}s"
        notes.append(f"1000 masks exact, {elapsed:.2f}s")


# 2 ------------------------------------------------------------------------


def test_c02_iou_oracle(criterion):
    with criterion(2, "mIoU oracle equivalence") as notes:
        gen = np.random.default_rng(202)
        for _ in range(1000):
            h, w = (int(v) for v in gen.integers(1, 9, size=2))
            p = gen.integers(0, 5, (h, w))
            t = gen.integers(0, 5, (h, w))
            p[gen.random((h, w)) < gen.random()] = 0
            t[gen.random((h, w)) < gen.random()] = 0
            assert sample_iou(p, t) == set_iou(p.tolist(), t.tolist())
        m = gen.integers(0, 5, (8, 8))
        assert sample_iou(m, m) == 1.0
        a, b = np.zeros((2, 2), int), np.zeros((2, 2), int)
        a[0, 0], b[1, 1] = 1, 1
        assert sample_iou(a, b) == 0.0
        pred, truth = np.array([[1, 1, 0]]), np.array([[0, 1, 1]])
        assert sample_iou(pred, truth) == 1 / 3
        notes.append("1000 pairs exact, fixed cases 1 / 0 / 1/3")


# 3 ------------------------------------------------------------------------


def test_c03_trigger_rates(criterion):
    with criterion(3, "augmentation trigger rates") as notes:
        policy = AugmentationPolicy(REFERENCE_P, crop_size=(2, 2), rng_seed=303)
        expected = dict(zip((1, 2, 3, 4), (0.9652, 0.874, 0.27, 0.887)))
        rng = policy.make_rng()
        n = 100_000
        kinds = {"random_crop": 0, "vertical_flip": 0, "random_rotation": 0}
        worst = 0.0
        for c, q in expected.items():
            mask = np.zeros((4, 4), np.uint8)
            mask[1, 1] = c
            sample = SampleRecord.from_arrays(f"c{c}", np.zeros((4, 4, 3), np.uint8), mask)
            hits = 0
            for _ in range(n):
                actions = maybe_augment(sample, policy, rng).applied_actions
                if actions:
                    hits += 1
                    kinds[actions[0]["kind"]] += 1
            z = (hits / n - q) / math.sqrt(q * (1 - q) / n)
            worst = max(worst, abs(z))
            assert abs(z) <= 3, f"class {c}: rate {hits / n:.4f} vs {q} (z={z:.2f})"
        total = sum(kinds.values())
        for (kind, count), w in zip(kinds.items(), policy.action_weights):
            z = (count / total - w) / math.sqrt(w * (1 - w) / total)
            worst = max(worst, abs(z))
            assert abs(z) <= 3, f"{kind}: frequency {count / total:.4f} vs {w:.4f} (z={z:.2f})"
        notes.append(f"4x{n} trials, max |z| = {worst:.2f}")


# 4 ------------------------------------------------------------------------


def _centroid(weights):
    ys, xs = np.nonzero(weights)
    if len(ys) == 0:
        return None
    v = weights[ys, xs].astype(float)
    return np.array([(ys * v).sum() / v.sum(), (xs * v).sum() / v.sum()])


def _aligned(image, mask):
    a, b = _centroid(image[..., 0]), _centroid(mask)
    if a is None or b is None:
        return a is None and b is None, 0.0
    d = float(np.linalg.norm(a - b))
    return d <= 1.0, d


def test_c04_paired_alignment(criterion):
    with criterion(4, "paired-transform alignment") as notes:
        gen = np.random.default_rng(404)
        worst = 0.0
        for kind, weights in (("vertical_flip", (0, 1, 0)), ("random_rotation", (0, 0, 1)), ("random_crop", (1, 0, 0))):
            for _ in range(100):
                h, w = (int(v) for v in gen.integers(24, 65, size=2))
                crop = (int(gen.integers(4, h + 1)), int(gen.integers(4, w + 1)))
                policy = AugmentationPolicy(REFERENCE_P, action_weights=weights, rotation_range=45, crop_size=crop)
                action = draw_action(policy, (h, w), gen)
                assert action["kind"] == kind
                image = np.zeros((h, w, 3), np.float32)
                mask = np.zeros((h, w), np.uint8)
                if kind == "random_rotation":
                    r = int(round((h - 1) / 2 + gen.integers(-8, 9)))
                    c = int(round((w - 1) / 2 + gen.integers(-8, 9)))
                    image[r - 1 : r + 2, c - 1 : c + 2] = 255
                    mask[r - 1 : r + 2, c - 1 : c + 2] = 1 + int(gen.integers(4))
                else:
                    if kind == "random_crop":
                        dy, dx = action["offset"]
                        r, c = dy + int(gen.integers(crop[0])), dx + int(gen.integers(crop[1]))
                    else:
                        r, c = int(gen.integers(h)), int(gen.integers(w))
                    image[r, c] = 255
                    mask[r, c] = 1 + int(gen.integers(4))
                out_image, out_mask = apply_action(image, mask, action)
                ok, d = _aligned(out_image, out_mask)
                worst = max(worst, d)
                assert ok and _centroid(out_mask) is not None, f"{kind} {action}: markers {d:.2f} px apart"
        image = gen.integers(0, 256, (17, 23, 3), dtype=np.uint8)
        mask = gen.integers(0, 5, (17, 23)).astype(np.uint8)
        assert all(np.array_equal(a, b) for a, b in zip(vertical_flip(*vertical_flip(image, mask)), (image, mask)))
        assert all(np.array_equal(a, b) for a, b in zip(random_rotation(image, mask, 0.0), (image, mask)))
        notes.append(f"3x100 markers, worst offset {worst:.2f} px; identities exact")


# 5 ------------------------------------------------------------------------


def test_c05_shape_contract(criterion):
    with criterion(5, "shape contract") as notes:
        torch.manual_seed(0)
        checked = 0
        for name in REGISTRY:
            for variant in ("baseline", "deeplabv3plus"):
                model = build_model(ModelConfig(backbone=name, variant=variant), seed=0).eval()
                with torch.no_grad():
                    for h in (64, 128, 256):
                        for w in (64, 128, 256):
                            out = model(torch.randn(2, 3, h, w))
                            assert tuple(out.shape) == (2, 5, h, w), f"{name}/{variant} {h}x{w} -> {tuple(out.shape)}"
                            checked += 1
                    with pytest.raises(ShapeError, match="divisible by 16"):
                        model(torch.randn(1, 3, 64, 72 + 1))
                    if name in ("tiny", "efficientnet_b1"):
                        full = predict_padded(model, torch.randn(1, 3, 256, 1700))
                        assert tuple(full.argmax(1).shape) == (1, 256, 1700)
        notes.append(f"{checked} forward shapes over {len(REGISTRY)} backbones x 2 variants")


# 6 ------------------------------------------------------------------------


def test_c06_gradient_check(criterion):
    with criterion(6, "gradient check") as notes:
        start = time.perf_counter()
        cfg = ModelConfig(backbone="tiny", aspp_channels=8, decoder_channels=8, low_level_projection=8)
        model = build_model(cfg, seed=6).double().eval()
        gen = torch.Generator().manual_seed(6)
        x = torch.randn(1, 3, 16, 16, generator=gen, dtype=torch.float64)
        y = torch.randint(0, 5, (1, 16, 16), generator=gen)

        def loss():
            return F.cross_entropy(model(x), y)

        model.zero_grad()
        loss().backward()
        params = [p for p in model.parameters() if p.requires_grad]
        sizes = np.array([p.numel() for p in params])
        picks = np.random.default_rng(6).choice(sizes.sum(), size=20, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        eps, worst = 1e-5, 0.0
        with torch.no_grad():
            for g in picks:
                k = int(np.searchsorted(offsets, g, side="right") - 1)
                flat, i = params[k].view(-1), int(g - offsets[k])
                analytic = float(params[k].grad.view(-1)[i])
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss())
                flat[i] = orig - eps
                down = float(loss())
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7)
                worst = max(worst, rel)
                assert rel <= 1e-3, f"parameter {k}[{i}]: analytic {analytic:.3e} vs numeric {numeric:.3e}"
        elapsed = time.perf_counter() - start
        assert elapsed < 120
        notes.append(f"20 parameters, max relative error {worst:.1e}")


# 7 ------------------------------------------------------------------------


def test_c07_overfit_oracle(criterion):
    with criterion(7, "overfit oracle") as notes:
        start = time.perf_counter()
        records = make_records(8, 64, 64, seed=0)
        assert {c for r in records for c in r.defect_classes_present} == {1, 2, 3, 4}
        cfg = ModelConfig(backbone="tiny", aspp_channels=64, decoder_channels=64, low_level_projection=16)
        train = TrainConfig(batch_size=4, epochs=150, image_size=(64, 64), seed=0)
        result = fit(build_model(cfg, seed=0), cfg, records, train)
        losses = [r.train_loss for r in result.records]
        assert len(losses) == 300
        spec = cfg.backbone_spec
        miou = evaluate_split(
            result.state.model,
            iterate_batches(records, batch_size=4, target_size=(64, 64), mean=spec.mean, std=spec.std),
        ).mean_iou
        ratio = losses[-1] / losses[0]
        assert ratio < 0.2, f"final loss {losses[-1]:.3f} is {ratio:.0%} of initial {losses[0]:.3f}"
        assert miou >= 0.9, f"train mIoU {miou:.3f}"
        assert time.perf_counter() - start < 600
        notes.append(f"loss {losses[0]:.3f} -> {losses[-1]:.3f}, train mIoU {miou:.3f}")


# 8 ------------------------------------------------------------------------


def _key(records):
    return [(r.step, r.epoch, r.train_loss, r.eval_miou) for r in records]


def test_c08_determinism_and_resume(criterion, tmp_path):
    with criterion(8, "determinism and resume") as notes:
        cfg = ModelConfig(backbone="tiny", aspp_channels=16, decoder_channels=16, low_level_projection=8)
        records = make_records(10, 64, 64, seed=8, defect_free=2)
        policy = AugmentationPolicy(REFERENCE_P, crop_size=(48, 48), rng_seed=8)
        full = TrainConfig(batch_size=4, epochs=4, image_size=(64, 64), seed=8)

        def run(config, run_dir=None, resume=False, init_seed=8):
            return fit(build_model(cfg, seed=init_seed), cfg, records[:8], config, run_dir,
                       eval_records=records[8:], policy=policy, resume=resume).records

        a, b = run(full, tmp_path / "a"), run(full, tmp_path / "b")
        assert _key(a) == _key(b), "twin runs diverged"
        run(replace(full, epochs=2), tmp_path / "c")
        resumed = run(full, tmp_path / "c", resume=True, init_seed=999)
        assert _key(resumed) == _key(a)[len(a) - len(resumed):], "resumed run diverged"
        notes.append(f"{len(a)} steps identical, resumed tail of {len(resumed)} steps matches")


# 9 ------------------------------------------------------------------------


def _data_root():
    env = os.environ.get("STEELSEG_DATA_ROOT")
    for cand in ([env] if env else []) + list(DATA_CANDIDATES):
        p = Path(cand).expanduser()
        if (p / "train.csv").is_file():
            return p
    return None


def test_c09_dataset_statistics(criterion, tmp_path):
    with criterion(9, "dataset statistics") as notes:
        root = _data_root()
        if root is None:
            pytest.skip("full training set not found (set STEELSEG_DATA_ROOT)")
        assert main(["stats", "--data-dir", str(root), "--json", str(tmp_path / "stats.json")]) == 0
        s = json.loads((tmp_path / "stats.json").read_text())
        assert s["image_count"] == 12568, s["image_count"]
        assert s["images_with_defect"] == 6666, s["images_with_defect"]
        assert s["region_total"] == 7095, s["region_total"]
        share3, area = s["count_shares"]["3"], s["area_shares"]
        assert abs(share3 - 0.73) <= 0.02, f"class-3 count share {share3:.4f}"
        assert abs(area["4"] - 0.17) <= 0.02, f"class-4 area share {area['4']:.4f}"
        assert abs(area["1"] - 0.0051) <= 0.005, f"class-1 area share {area['1']:.4f}"
        assert abs(area["2"] - 0.0239) <= 0.005, f"class-2 area share {area['2']:.4f}"
        notes.append(f"class-3 count share {share3:.3f}, area shares " +
                     "/".join(f"{area[str(c)]:.4f}" for c in (1, 2, 3, 4)))


# 10 -----------------------------------------------------------------------


def test_c10_benchmark_report(criterion, tmp_path, capsys):
    with criterion(10, "benchmark report") as notes:
        out_json = tmp_path / "bench.json"
        code = main(["benchmark", "--backbones", "resnet101", "densenet201", "efficientnet_b1", "--baseline",
                     "--units", "1", "--warmup", "0", "--rounds", "1", "--train-batch", "16",
                     "--resized-size", "128", "128", "--original-size", "256", "1700", "--json", str(out_json)])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        header = [c.strip() for c in lines[0].split("|")]
        assert header == ["Model backbone", "Train(iter/s)", "Eval Resized Image(image/s)", "Eval Original Image(image/s)"]
        rows = [line.split("|")[0].strip() for line in lines[2:6]]
        assert rows == ["Base (resnet101)", "resnet101", "densenet201", "efficientnet_b1"], rows
        data = json.loads(out_json.read_text())
        for r in data:
            assert r["batch_sizes"] == {"train": 16, "eval_resized": 1, "eval_original": 1}
            for mode in ("train", "eval_resized", "eval_original"):
                assert r[mode]["rate"] > 0, f"{r['backbone']} {mode}"
        notes.append(f"{len(data)} rows x 3 rate columns, batch sizes 16/1")
