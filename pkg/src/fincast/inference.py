"""Patch-wise autoregressive forecasting with key/value caching."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .decoder import KVCache
from .input_block import normalize_patches, patchify_batch
from .output_block import crossing_rate

log = logging.getLogger(__name__)


class ForecastError(RuntimeError):
    pass


@dataclass
class Forecast:
    point: np.ndarray          # B×H_full, original units
    quantiles: np.ndarray      # B×|Q|×H_full
    quantile_levels: tuple
    iterations: int

    @property
    def crossing_rate(self):
        return crossing_rate(self.quantiles, axis=-2)


def worker_count():
    try:
        return max(1, int(os.environ.get("FINCAST_THREADS", "1")))
    except ValueError:
        return 1


def forecast_batch(model, contexts, horizon, freq_index=3, use_cache=True):
    """Forecast ``horizon`` steps for each row of a B×L array of equal-length contexts.

    Each iteration takes the last token's H_out-step outputs in original units;
    the point path is appended to the context and decoding continues. While
    patch alignment and the context limit allow it, later iterations embed
    only the new patches and attend to cached keys/values.
    """
    cfg = model.config
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    ctx = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    if ctx.shape[1] < 1:
        raise ValueError("context must hold at least one value")
    if not np.all(np.isfinite(ctx)):
        raise ValueError("context contains non-finite values")
    ctx = ctx[:, -cfg.max_context:]
    b = ctx.shape[0]
    h_out, p = cfg.horizon_len, cfg.patch_len
    n_q = len(cfg.quantile_levels)
    iters = math.ceil(horizon / h_out)
    freq = np.broadcast_to(np.asarray(freq_index, dtype=np.int64), (b,)).copy()
    dtype = model.params["input.w_hidden"].dtype
    aligned = h_out % p == 0

    points, quants = [], []
    caches = None
    with tc.no_grad():
        for it in range(iters):
            fresh = caches is None or not use_cache
            if not fresh and ctx.shape[1] > cfg.max_context:
                fresh = True
            if fresh:
                ctx = ctx[:, -cfg.max_context:]
                raw, mask = patchify_batch(ctx, p)
                batch = normalize_patches(raw, mask, freq)
                caches = [KVCache() for _ in range(cfg.n_layers)] if (use_cache and aligned) else None
            else:
                raw, mask = patchify_batch(ctx[:, -h_out:], p)
                batch = normalize_patches(raw, mask, freq)
            out, _ = model.forward(batch, caches=caches)
            mu = batch.mu[:, -1].astype(dtype)
            sigma = batch.sigma[:, -1].astype(dtype)
            step_point = out.point.data[:, -1, :] * sigma[:, None] + mu[:, None]
            step_q = out.quantiles.data[:, -1] * sigma[:, None, None] + mu[:, None, None]
            if not np.all(np.isfinite(step_point)):
                raise ForecastError(f"non-finite forecast at iteration {it + 1}: "
                                    f"{np.count_nonzero(~np.isfinite(step_point))} bad values")
            points.append(np.asarray(step_point, dtype=np.float64))
            quants.append(np.asarray(step_q, dtype=np.float64))
            if it + 1 < iters:
                ctx = np.concatenate([ctx, points[-1]], axis=1)
                if not aligned:
                    caches = None
    point = np.concatenate(points, axis=1)[:, :horizon]
    quant = np.concatenate(quants, axis=2)[:, :, :horizon] if n_q else np.zeros((b, 0, horizon))
    return Forecast(point, quant, cfg.quantile_levels, iters)


def forecast(model, series, horizon, freq_index=None, use_cache=True):
    """Forecast one series (a Series or a 1-D array)."""
    values = getattr(series, "values", series)
    if freq_index is None:
        freq_index = getattr(series, "freq_index", 3)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("series must be 1-D with at least one value")
    return forecast_batch(model, values[None, :], horizon, freq_index, use_cache)


def forecast_multichannel(model, matrix, horizon, freq_index=3, use_cache=True, workers=None):
    """Channel-independent forecasts of a c×L matrix.

    Every channel runs through :func:`forecast` on its own, so the result for
    a channel never depends on the others.
    """
    if isinstance(matrix, (list, tuple)):
        lengths = {len(np.atleast_1d(r)) for r in matrix}
        if len(lengths) > 1:
            raise ValueError(f"ragged channels: lengths {sorted(lengths)}")
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError("expected a c×L matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("every channel must be finite")
    workers = workers or worker_count()

    def one(row):
        return forecast(model, row, horizon, freq_index, use_cache)

    if workers > 1 and m.shape[0] > 1:
        with ThreadPoolExecutor(max_workers=min(workers, m.shape[0])) as pool:
            results = list(pool.map(one, m))
    else:
        results = [one(row) for row in m]
    point = np.stack([r.point[0] for r in results])
    quant = np.stack([r.quantiles[0] for r in results])
    return Forecast(point, quant, model.config.quantile_levels, results[0].iterations)
