"""Loop-shaped numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``FINCAST_NUMBA`` (``0`` forces
numpy, anything else uses numba when it can be imported). ``set_backend``
switches it at runtime, which the tests and the benchmark use to compare the
two paths on identical inputs.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_NUMBA_KW = dict(cache=True, nogil=True)


def _env_backend() -> str:
    flag = os.environ.get("FINCAST_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or not HAS_NUMBA:
        return "numpy"
    return "numba"


BACKEND = _env_backend()


def set_backend(name: str) -> None:
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not importable")
    BACKEND = name


def get_backend() -> str:
    return BACKEND


def _njit(fn):
    if HAS_NUMBA:
        return numba.njit(**_NUMBA_KW)(fn)
    return fn


# ---------------------------------------------------------------------------
# rolling z-score clipping (sequential: each point is judged against the
# already-cleaned trailing window, so a clipped spike never pollutes later
# windows)

def _rolling_clip_py(x, window, threshold, min_periods):
    n = x.shape[0]
    y = x.copy()
    flags = np.zeros(n, dtype=np.bool_)
    for t in range(min_periods, n):
        lo = t - window
        if lo < 0:
            lo = 0
        cnt = t - lo
        mean = 0.0
        for j in range(lo, t):
            mean += y[j]
        mean /= cnt
        var = 0.0
        for j in range(lo, t):
            d = y[j] - mean
            var += d * d
        var /= cnt
        if var > 0.0:
            sd = np.sqrt(var)
            z = (y[t] - mean) / sd
            if z > threshold:
                y[t] = mean + threshold * sd
                flags[t] = True
            elif z < -threshold:
                y[t] = mean - threshold * sd
                flags[t] = True
    return y, flags


_rolling_clip_nb = _njit(_rolling_clip_py)


def rolling_zscore_clip(x, window=256, threshold=12.0, min_periods=16):
    """Clip points whose z-score against the trailing window exceeds ``threshold``.

    Returns the clipped copy and a boolean mask of clipped positions. Windows
    with zero spread are skipped (a flat stretch carries no scale to judge by).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if BACKEND == "numba":
        return _rolling_clip_nb(x, int(window), float(threshold), int(min_periods))
    return _rolling_clip_numpy(x, int(window), float(threshold), int(min_periods))


def _trailing_stats(y, t0, t1, window):
    """Two-pass mean/std of y[max(t-window,0):t] for t in [t0, t1)."""
    ts = np.arange(t0, t1)
    mean = np.empty(ts.size)
    sd = np.empty(ts.size)
    # the first `window` positions have growing windows; the rest are a strided view
    short = ts < window
    for i in np.flatnonzero(short):
        seg = y[:ts[i]]
        m = seg.sum() / seg.size
        mean[i] = m
        sd[i] = np.sqrt(((seg - m) ** 2).sum() / seg.size)
    full = ts[~short]
    if full.size:
        view = np.lib.stride_tricks.sliding_window_view(y, window)
        for c in range(0, full.size, 4096):
            rows = view[full[c:c + 4096] - window]
            m = rows.sum(axis=1) / window
            pos = np.flatnonzero(~short)[c:c + 4096]
            mean[pos] = m
            sd[pos] = np.sqrt(((rows - m[:, None]) ** 2).sum(axis=1) / window)
    return mean, sd


def _rolling_clip_numpy(x, window, threshold, min_periods):
    n = x.shape[0]
    y = x.copy()
    flags = np.zeros(n, dtype=bool)
    if n <= min_periods:
        return y, flags
    t0 = min_periods
    mean, sd = _trailing_stats(y, t0, n, window)
    while True:
        with np.errstate(invalid="ignore", divide="ignore"):
            z = np.where(sd > 0, (y[t0:] - mean) / np.where(sd > 0, sd, 1.0), 0.0)
        hits = np.flatnonzero(np.abs(z) > threshold)
        if hits.size == 0:
            return y, flags
        h = hits[0]
        t = t0 + h
        y[t] = mean[h] + (threshold if z[h] > 0 else -threshold) * sd[h]
        flags[t] = True
        # only windows that contain position t change
        t0 = t + 1
        if t0 >= n:
            return y, flags
        stop = min(n, t + window + 1)
        m2, s2 = _trailing_stats(y, t0, stop, window)
        mean = np.concatenate([m2, mean[h + 1 + (stop - t0):]])
        sd = np.concatenate([s2, sd[h + 1 + (stop - t0):]])


# ---------------------------------------------------------------------------
# masked per-patch statistics

def _patch_stats_py(x, mask, eps):
    b, n, p = x.shape
    mu = np.zeros((b, n))
    sigma = np.ones((b, n))
    degenerate = np.zeros((b, n), dtype=np.bool_)
    for i in range(b):
        for j in range(n):
            cnt = 0
            s = 0.0
            for k in range(p):
                if mask[i, j, k] == 0:
                    s += x[i, j, k]
                    cnt += 1
            if cnt == 0:
                degenerate[i, j] = True
                continue
            m = s / cnt
            v = 0.0
            for k in range(p):
                if mask[i, j, k] == 0:
                    d = x[i, j, k] - m
                    v += d * d
            sd = np.sqrt(v / cnt)
            mu[i, j] = m
            if sd < eps:
                sd = eps
            sigma[i, j] = sd
    return mu, sigma, degenerate


_patch_stats_nb = _njit(_patch_stats_py)


def patch_stats(x, mask, eps=1e-6):
    """Mean and population std of each patch over its non-masked positions.

    ``x`` and ``mask`` are B×N×P; mask 1 marks a masked position. All-masked
    patches fall back to (0, 1) and are flagged in the third output.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    if BACKEND == "numba":
        return _patch_stats_nb(x, mask, float(eps))
    keep = 1.0 - mask
    cnt = keep.sum(-1)
    degenerate = cnt == 0
    safe = np.where(degenerate, 1.0, cnt)
    mu = (x * keep).sum(-1) / safe
    var = (((x - mu[..., None]) * keep) ** 2).sum(-1) / safe
    sigma = np.maximum(np.sqrt(var), eps)
    mu = np.where(degenerate, 0.0, mu)
    sigma = np.where(degenerate, 1.0, sigma)
    return mu, sigma, degenerate


# ---------------------------------------------------------------------------
# top-k selection, ties to the lowest index

def _topk_py(scores, k):
    t, e = scores.shape
    out = np.empty((t, k), dtype=np.int64)
    taken = np.zeros(e, dtype=np.bool_)
    for i in range(t):
        taken[:] = False
        for slot in range(k):
            best = -1
            for j in range(e):
                if taken[j]:
                    continue
                if best < 0 or scores[i, j] > scores[i, best]:
                    best = j
            taken[best] = True
            out[i, slot] = best
    return out


_topk_nb = _njit(_topk_py)


def topk_indices(scores, k):
    """Indices of the k largest entries per row, in descending score order."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if BACKEND == "numba":
        return _topk_nb(scores, int(k))
    order = np.argsort(-scores, axis=-1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


# ---------------------------------------------------------------------------
# row scatter-add (the backward of a row gather, and MoE recombination)

def _scatter_rows_py(out, idx, vals):
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(vals.shape[1]):
            out[r, j] += vals[i, j]
    return out


_scatter_rows_nb = _njit(_scatter_rows_py)


def scatter_add_rows(n_rows, idx, vals):
    """Return an ``n_rows``×D array with ``vals[i]`` added into row ``idx[i]``."""
    vals = np.ascontiguousarray(vals)
    out = np.zeros((n_rows,) + vals.shape[1:], dtype=vals.dtype)
    if vals.shape[0] == 0:
        return out
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if BACKEND == "numba" and vals.ndim == 2:
        return _scatter_rows_nb(out, idx, vals)
    np.add.at(out, idx, vals)
    return out
