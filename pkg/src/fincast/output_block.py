"""Residual output head and the inverse of the per-patch normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc

DECILES = tuple(round(0.1 * i, 1) for i in range(1, 10))


def check_quantiles(q):
    q = tuple(float(x) for x in q)
    if any(not 0.0 < x < 1.0 for x in q):
        raise ValueError(f"quantiles must lie in (0, 1): {q}")
    if any(b <= a for a, b in zip(q, q[1:])):
        raise ValueError(f"quantiles must be strictly ascending: {q}")
    return q


@dataclass
class ForecastOutput:
    point: object        # B×N×H_out (Tensor while training, ndarray after)
    quantiles: object    # B×N×|Q|×H_out
    restored: bool = False

    def numpy(self):
        p = self.point.data if isinstance(self.point, tc.Tensor) else self.point
        q = self.quantiles.data if isinstance(self.quantiles, tc.Tensor) else self.quantiles
        return ForecastOutput(np.asarray(p), np.asarray(q), self.restored)


def project_outputs(h, params, horizon, n_quantiles):
    """Map B×N×D hidden states to per-token point and quantile forecasts.

    Output layout per token is [point | q_1 | ... | q_|Q|], H_out values each.
    """
    b, n, _ = h.shape
    width = horizon * (1 + n_quantiles)
    hidden = tc.silu(h @ params["output.w_hidden"] + params["output.b_hidden"])
    y = hidden @ params["output.w_out"] + params["output.b_out"] + h @ params["output.w_skip"]
    if y.shape[-1] != width:
        raise ValueError(f"output head emits {y.shape[-1]} values, expected {width}")
    y = tc.reshape(y, (b, n, 1 + n_quantiles, horizon))
    point = y[:, :, 0, :]
    quant = y[:, :, 1:, :]
    return ForecastOutput(point, quant, restored=False)


def denormalize(output: ForecastOutput, mu, sigma):
    """Map every token's outputs x -> x·σ_n + μ_n with that token's patch stats."""
    out = output.numpy()
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu is None or sigma is None or mu.shape != out.point.shape[:2] or sigma.shape != mu.shape:
        raise ValueError(f"need per-token stats of shape {out.point.shape[:2]}, "
                         f"got mu {None if mu is None else mu.shape}")
    point = out.point * sigma[..., None] + mu[..., None]
    quant = out.quantiles * sigma[..., None, None] + mu[..., None, None]
    return ForecastOutput(point, quant, restored=True)


def crossing_rate(quantiles, axis=-2):
    """Fraction of adjacent quantile pairs that come out of order."""
    q = np.asarray(quantiles)
    if q.shape[axis] < 2:
        return 0.0
    d = np.diff(q, axis=axis)
    return float((d < 0).mean())
