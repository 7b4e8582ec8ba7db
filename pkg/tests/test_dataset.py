import csv

import numpy as np
import pytest
from PIL import Image

from steelseg.dataset import (
    DatasetIndex,
    SampleRecord,
    compute_stats,
    iterate_batches,
    load_annotations,
    split_counts,
    split_dataset,
)
from steelseg.masks import rle_decode

from oracles import brute_stats


def _write_images(directory, names, shape=(256, 256)):
    directory.mkdir(parents=True, exist_ok=True)
    for name in names:
        Image.fromarray(np.zeros((*shape, 3), np.uint8)).save(directory / name)


def _write_csv(path, rows, header=("ImageId", "ClassId", "EncodedPixels")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def test_load_without_defect_rows(tmp_path):
    _write_images(tmp_path / "img", ["a.jpg", "b.jpg", "c.jpg"], (8, 8))
    _write_csv(tmp_path / "t.csv", [])
    index = load_annotations(tmp_path / "t.csv", tmp_path / "img")
    assert len(index) == 3
    assert all(not r.mask.any() for r in index.records)


def test_load_single_rle(tmp_path):
    _write_images(tmp_path / "img", ["a.jpg"])
    _write_csv(tmp_path / "t.csv", [("a.jpg", 3, "1 4")])
    (rec,) = load_annotations(tmp_path / "t.csv", tmp_path / "img").records
    np.testing.assert_array_equal(rec.mask == 3, rle_decode("1 4", 256, 256).astype(bool))
    assert (rec.mask == 3).sum() == 4
    assert rec.defect_classes_present == {3}


def test_load_legacy_column_format(tmp_path):
    _write_images(tmp_path / "img", ["a.jpg"], (4, 4))
    _write_csv(tmp_path / "t.csv", [("a.jpg_1", "1 2"), ("a.jpg_2", "")], header=("ImageId_ClassId", "EncodedPixels"))
    (rec,) = load_annotations(tmp_path / "t.csv", tmp_path / "img").records
    assert rec.defect_classes_present == {1}


def test_load_collects_issues(tmp_path):
    _write_images(tmp_path / "img", ["ok.jpg", "bad.jpg"], (4, 4))
    _write_csv(tmp_path / "t.csv", [("ghost.jpg", 1, "1 2"), ("bad.jpg", 2, "3 1 1 1"), ("ok.jpg", 4, "1 16")])
    index = load_annotations(tmp_path / "t.csv", tmp_path / "img")
    assert [r.image_id for r in index.records] == ["ok.jpg"]
    reasons = {i.image_id: i.reason for i in index.issues}
    assert "missing" in reasons["ghost.jpg"]
    assert "RLE" in reasons["bad.jpg"]


def test_run_past_image_is_reported(tmp_path):
    _write_images(tmp_path / "img", ["a.jpg"], (4, 4))
    _write_csv(tmp_path / "t.csv", [("a.jpg", 1, "10 10")])
    index = load_annotations(tmp_path / "t.csv", tmp_path / "img")
    assert not index.records and len(index.issues) == 1


def _index(n):
    return DatasetIndex(tuple(SampleRecord(f"img{i}", 2, 2, mask_array=np.zeros((2, 2), np.uint8)) for i in range(n)))


def test_split_exact_ratio():
    index = split_dataset(_index(10), seed=3)
    sizes = {name: len(index.split(name)) for name in ("train", "eval", "test")}
    assert sizes == {"train": 8, "eval": 1, "test": 1}


def test_split_deterministic():
    a = split_dataset(_index(50), seed=11).split_assignment
    b = split_dataset(_index(50), seed=11).split_assignment
    assert a == b
    assert a != split_dataset(_index(50), seed=12).split_assignment


def test_split_full_corpus_counts():
    assert split_counts(12568, (0.8, 0.1, 0.1)) == (10054, 1257, 1257)


def test_split_ratio_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        split_dataset(_index(4), (0.8, 0.1, 0.2))
    with pytest.raises(ValueError):
        split_dataset(_index(4), (1.0, 0.0, 0.0))


def test_split_property_many_sizes():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        n = int(gen.integers(1, 400))
        raw = gen.random(3) + 0.05
        ratios = raw / raw.sum()
        ratios[0] = 1.0 - ratios[1] - ratios[2]
        counts = split_counts(n, ratios)
        assert sum(counts) == n and min(counts) >= 0
        for c, r in zip(counts, ratios):
            assert abs(c - r * n) <= 1.0 + 1e-9


def test_split_partition_is_disjoint_and_exhaustive():
    index = split_dataset(_index(37), seed=5)
    parts = [set(r.image_id for r in index.split(s)) for s in ("train", "eval", "test")]
    assert set.union(*parts) == {r.image_id for r in index.records}
    assert sum(len(p) for p in parts) == 37


def test_stats_empty():
    stats = compute_stats([])
    assert stats.image_count == 0 and stats.region_total == 0
    assert all(v == 0 for v in stats.count_shares.values())


def test_stats_two_blobs():
    mask = np.zeros((5, 5), np.uint8)
    mask[0, :4] = 2
    mask[1, 1:4] = 2  # 7 connected px
    mask[4, 2:5] = 4  # 3 px
    stats = compute_stats([SampleRecord("x", 5, 5, mask_array=mask)])
    assert stats.region_counts == {1: 0, 2: 1, 3: 0, 4: 1}
    assert stats.area_shares[2] == pytest.approx(0.7) and stats.area_shares[4] == pytest.approx(0.3)
    assert stats.segment_counts == {1: 0, 2: 1, 3: 0, 4: 1}


def test_stats_match_flood_fill_oracle():
    gen = np.random.default_rng(42)
    masks = []
    for _ in range(60):
        h, w = gen.integers(1, 17, size=2)
        m = gen.integers(0, 5, size=(h, w)).astype(np.uint8)
        m[gen.random((h, w)) < 0.5] = 0
        masks.append(m)
    stats = compute_stats([SampleRecord(str(i), *m.shape, mask_array=m) for i, m in enumerate(masks)])
    ref = brute_stats([m.tolist() for m in masks])
    assert stats.image_count == ref["images"]
    assert stats.images_with_defect == ref["with_defect"]
    assert stats.region_counts == ref["regions"]
    assert stats.segment_counts == ref["segments"]
    assert stats.pixel_counts == ref["pixels"]
    assert stats.segments_per_image == ref["hist"]
    assert sum(stats.count_shares.values()) == pytest.approx(1.0, abs=1e-9)
    assert sum(stats.area_shares.values()) == pytest.approx(1.0, abs=1e-9)


def test_fragmentation_fraction():
    m = np.zeros((3, 13), np.uint8)
    m[0, ::2] = 1  # seven isolated class-1 pixels
    stats = compute_stats([SampleRecord("a", 3, 13, mask_array=m)])
    assert stats.segments_per_image[1] == {7: 1}
    assert stats.fraction_with_more_than(1, 5) == 1.0
    assert stats.fraction_with_more_than(1, 10) == 0.0
    assert "regions: 1" in stats.format_table()


def _records(n, shape=(32, 48)):
    gen = np.random.default_rng(0)
    return [
        SampleRecord.from_arrays(
            f"r{i}", gen.integers(0, 256, (*shape, 3), dtype=np.uint8), gen.integers(0, 5, shape).astype(np.uint8)
        )
        for i in range(n)
    ]


def test_batch_sizes_keep_partial_batch():
    sizes = [len(b.image_ids) for b in iterate_batches(_records(5), batch_size=2, target_size=(16, 16))]
    assert sizes == [2, 2, 1]


def test_batch_shapes_and_labels():
    (b,) = list(iterate_batches(_records(3), batch_size=3, target_size=(256, 256)))
    assert tuple(b.images.shape) == (3, 3, 256, 256)
    assert tuple(b.masks.shape) == (3, 256, 256)
    assert set(b.masks.unique().tolist()) <= {0, 1, 2, 3, 4}


def test_batch_order_deterministic():
    recs = _records(7)
    order = lambda: [i for b in iterate_batches(recs, batch_size=3, target_size=(8, 8), shuffle_seed=9) for i in b.image_ids]
    assert order() == order()
    assert sorted(order()) == sorted(r.image_id for r in recs)


def test_unreadable_image_is_skipped(tmp_path, caplog):
    recs = _records(2)
    recs.append(SampleRecord("gone", 4, 4, image_path=tmp_path / "gone.png"))
    ids = [i for b in iterate_batches(recs, batch_size=4, target_size=(8, 8)) for i in b.image_ids]
    assert ids == ["r0", "r1"]
    assert "gone" in caplog.text


def test_empty_split_rejected():
    with pytest.raises(ValueError, match="empty"):
        list(iterate_batches([], batch_size=2))


def test_synthetic_corpus_loads(corpus_dir):
    index = load_annotations(corpus_dir / "train.csv", corpus_dir / "train_images")
    assert len(index) == 10 and not index.issues
    stats = compute_stats(index)
    assert stats.images_with_defect == 8
