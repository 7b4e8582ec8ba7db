"""Hot pixel-level kernels.

Every kernel exists twice: a numba ``@njit`` loop and a vectorised numpy (or
scipy) equivalent.  The module level names (``encode_runs``, ``label_components``
...) are bound to one of the two according to :data:`steelseg._accel.NUMBA_ENABLED`.
Both variants are always importable through :func:`get_backend` so they can be
cross-checked and benchmarked in a single process.

Coordinates: arrays are ``(row, col)``; flat pixel streams for run-length
coding are column-major (``mask.T.ravel()``).
"""
from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from scipy import ndimage

from ._accel import NUMBA_ENABLED, njit

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


# --------------------------------------------------------------------------
# run-length coding


@njit(cache=True)
def _encode_runs_jit(flat):
    n = flat.shape[0]
    out = np.empty((n // 2 + 1, 2), np.int64)
    k = 0
    i = 0
    while i < n:
        if flat[i] != 0:
            j = i
            while j < n and flat[j] != 0:
                j += 1
            out[k, 0] = i + 1
            out[k, 1] = j - i
            k += 1
            i = j
        else:
            i += 1
    return out[:k].copy()


def _encode_runs_np(flat):
    padded = np.zeros(flat.shape[0] + 2, dtype=np.int8)
    padded[1:-1] = flat != 0
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return np.stack([starts + 1, ends - starts], axis=1).astype(np.int64)


@njit(cache=True)
def _decode_runs_jit(starts, lengths, size):
    out = np.zeros(size, np.uint8)
    for k in range(starts.shape[0]):
        s = starts[k] - 1
        for i in range(s, s + lengths[k]):
            out[i] = 1
    return out


def _decode_runs_np(starts, lengths, size):
    delta = np.zeros(size + 1, dtype=np.int32)
    np.add.at(delta, starts - 1, 1)
    np.add.at(delta, starts - 1 + lengths, -1)
    return (np.cumsum(delta[:-1]) > 0).astype(np.uint8)


# --------------------------------------------------------------------------
# 4-connected component labelling, labels numbered in row-major order of
# each component's first pixel


@njit(cache=True)
def _label_jit(binary):
    h, w = binary.shape
    labels = np.zeros((h, w), np.int32)
    stack = np.empty(h * w, np.int64)
    n = 0
    for r in range(h):
        for c in range(w):
            if binary[r, c] == 0 or labels[r, c] != 0:
                continue
            n += 1
            labels[r, c] = n
            stack[0] = r * w + c
            top = 1
            while top > 0:
                top -= 1
                p = stack[top]
                pr = p // w
                pc = p - pr * w
                if pr > 0 and binary[pr - 1, pc] != 0 and labels[pr - 1, pc] == 0:
                    labels[pr - 1, pc] = n
                    stack[top] = p - w
                    top += 1
                if pr < h - 1 and binary[pr + 1, pc] != 0 and labels[pr + 1, pc] == 0:
                    labels[pr + 1, pc] = n
                    stack[top] = p + w
                    top += 1
                if pc > 0 and binary[pr, pc - 1] != 0 and labels[pr, pc - 1] == 0:
                    labels[pr, pc - 1] = n
                    stack[top] = p - 1
                    top += 1
                if pc < w - 1 and binary[pr, pc + 1] != 0 and labels[pr, pc + 1] == 0:
                    labels[pr, pc + 1] = n
                    stack[top] = p + 1
                    top += 1
    return labels, n


def _label_np(binary):
    labels, n = ndimage.label(binary != 0, structure=_CROSS)
    return labels.astype(np.int32), int(n)


# --------------------------------------------------------------------------
# confusion counts: counts[p, t] = #pixels with pred p and truth t


@njit(cache=True)
def _confusion_jit(pred, truth, k):
    counts = np.zeros((k, k), np.int64)
    p = pred.ravel()
    t = truth.ravel()
    for i in range(p.shape[0]):
        counts[p[i], t[i]] += 1
    return counts


def _confusion_np(pred, truth, k):
    flat = pred.ravel().astype(np.int64) * k + truth.ravel().astype(np.int64)
    return np.bincount(flat, minlength=k * k).reshape(k, k)


# --------------------------------------------------------------------------
# rotation about the canvas centre, counter-clockwise for positive angles,
# inverse mapped; samples falling outside the canvas read as 0


@njit(cache=True)
def _rotate_nearest_jit(src, angle):
    h, w = src.shape
    out = np.zeros_like(src)
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    ct = np.cos(angle)
    st = np.sin(angle)
    for r in range(h):
        dy = r - cy
        for c in range(w):
            dx = c - cx
            x = cx + dx * ct - dy * st
            y = cy + dx * st + dy * ct
            sc = int(np.floor(x + 0.5))
            sr = int(np.floor(y + 0.5))
            if 0 <= sr < h and 0 <= sc < w:
                out[r, c] = src[sr, sc]
    return out


def _rotate_nearest_np(src, angle):
    h, w = src.shape
    x, y = _inverse_coords(h, w, angle)
    sc = np.floor(x + 0.5).astype(np.int64)
    sr = np.floor(y + 0.5).astype(np.int64)
    valid = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
    out = np.zeros_like(src)
    out[valid] = src[sr[valid], sc[valid]]
    return out


@njit(cache=True)
def _rotate_bilinear_jit(src, angle):
    h, w, ch = src.shape
    out = np.zeros((h, w, ch), np.float32)
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    ct = np.cos(angle)
    st = np.sin(angle)
    for r in range(h):
        dy = r - cy
        for c in range(w):
            dx = c - cx
            x = cx + dx * ct - dy * st
            y = cy + dx * st + dy * ct
            x0f = np.floor(x)
            y0f = np.floor(y)
            fx = x - x0f
            fy = y - y0f
            x0 = int(x0f)
            y0 = int(y0f)
            for k in range(ch):
                acc = 0.0
                if 0 <= y0 < h and 0 <= x0 < w:
                    acc += (1.0 - fy) * (1.0 - fx) * src[y0, x0, k]
                if 0 <= y0 < h and 0 <= x0 + 1 < w:
                    acc += (1.0 - fy) * fx * src[y0, x0 + 1, k]
                if 0 <= y0 + 1 < h and 0 <= x0 < w:
                    acc += fy * (1.0 - fx) * src[y0 + 1, x0, k]
                if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w:
                    acc += fy * fx * src[y0 + 1, x0 + 1, k]
                out[r, c, k] = acc
    return out


def _rotate_bilinear_np(src, angle):
    h, w, ch = src.shape
    x, y = _inverse_coords(h, w, angle)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    acc = np.zeros((h, w, ch), dtype=np.float64)
    for oy, ox, wt in (
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ):
        rr = y0 + oy
        cc = x0 + ox
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        sample = np.zeros((h, w, ch), dtype=np.float64)
        sample[valid] = src[rr[valid], cc[valid]]
        acc += wt * sample
    return acc.astype(np.float32)


def _inverse_coords(h, w, angle):
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    ct = np.cos(angle)
    st = np.sin(angle)
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    return cx + dx * ct - dy * st, cy + dx * st + dy * ct


# --------------------------------------------------------------------------

_BACKENDS = {
    "numba": SimpleNamespace(
        name="numba",
        encode_runs=_encode_runs_jit,
        decode_runs=_decode_runs_jit,
        label_components=_label_jit,
        confusion=_confusion_jit,
        rotate_nearest=_rotate_nearest_jit,
        rotate_bilinear=_rotate_bilinear_jit,
    ),
    "numpy": SimpleNamespace(
        name="numpy",
        encode_runs=_encode_runs_np,
        decode_runs=_decode_runs_np,
        label_components=_label_np,
        confusion=_confusion_np,
        rotate_nearest=_rotate_nearest_np,
        rotate_bilinear=_rotate_bilinear_np,
    ),
}

ACTIVE_BACKEND = "numba" if NUMBA_ENABLED else "numpy"


def get_backend(name: str | None = None) -> SimpleNamespace:
    """Return the kernel set ``name`` (``"numba"`` / ``"numpy"``), default active."""
    if name is None:
        name = ACTIVE_BACKEND
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; choose from {sorted(_BACKENDS)}") from None


_active = _BACKENDS[ACTIVE_BACKEND]
encode_runs = _active.encode_runs
decode_runs = _active.decode_runs
label_components = _active.label_components
confusion = _active.confusion
rotate_nearest = _active.rotate_nearest
rotate_bilinear = _active.rotate_bilinear
