"""Time the numba kernels against their numpy twins on Severstal-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

The first numba call (JIT compilation) is excluded by a warm-up call.
"""
import argparse
import json
import math
import timeit

import numpy as np

from steelseg import kernels

H, W = 256, 1600


def _inputs(seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros((H, W), np.uint8)
    for _ in range(40):
        r, c = rng.integers(0, H - 40), rng.integers(0, W - 200)
        mask[r : r + rng.integers(5, 40), c : c + rng.integers(20, 200)] = 1
    flat = mask.ravel(order="F")
    runs = kernels.get_backend("numpy").encode_runs(flat)
    labels = rng.integers(0, 5, (H, W)).astype(np.int64)
    pred = rng.integers(0, 5, (H, W)).astype(np.int64)
    image = rng.random((H, W, 3), dtype=np.float32)
    return {
        "encode_runs": lambda k: k.encode_runs(flat),
        "decode_runs": lambda k: k.decode_runs(runs[:, 0], runs[:, 1], H * W),
        "label_components": lambda k: k.label_components(mask.astype(bool)),
        "confusion": lambda k: k.confusion(pred.ravel(), labels.ravel(), 5),
        "rotate_nearest": lambda k: k.rotate_nearest(mask, math.radians(10)),
        "rotate_bilinear": lambda k: k.rotate_bilinear(image, math.radians(10)),
    }


def run(repeat: int):
    cases = _inputs()
    backends = [name for name in ("numpy", "numba") if name in kernels._BACKENDS]
    rows = []
    for name, fn in cases.items():
        row = {"kernel": name}
        for b in backends:
            k = kernels.get_backend(b)
            fn(k)
            row[b] = min(timeit.repeat(lambda: fn(k), number=1, repeat=repeat)) * 1e3
        rows.append(row)
    return backends, rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json")
    args = parser.parse_args(argv)
    backends, rows = run(args.repeat)
    print(f"{'kernel':<18}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speed-up':>10}")
    for r in rows:
        line = f"{r['kernel']:<18}" + "".join(f"{r[b]:>14.3f}" for b in backends)
        if "numba" in r:
            line += f"{r['numpy'] / r['numba']:>9.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
