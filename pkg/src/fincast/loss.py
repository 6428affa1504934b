"""Point-quantile objective: Huber + pinball + trend + MoE regularizers."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor_core as tc


@dataclass
class LossWeights:
    lambda_quantile: float = 1.0
    lambda_trend: float = 0.2
    lambda_moe: float = 0.01
    delta: float = 1.0
    mse_point: bool = False   # "w/o PQ-loss" ablation: plain MSE point term

    def __post_init__(self):
        for name in ("lambda_quantile", "lambda_trend", "lambda_moe"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class LossBreakdown:
    point: object
    quantile: object
    trend: object
    balance: object
    router_z: object
    total: object

    def values(self):
        """Plain floats for logging."""
        return {f.name: float(tc.as_tensor(getattr(self, f.name)).data) for f in fields(self)}


def _weighted_mean(x, w):
    # w is a constant 0/1 array broadcastable to x
    denom = float(np.sum(np.broadcast_to(w, x.shape)))
    if denom == 0:
        return tc.Tensor(np.zeros((), dtype=x.dtype))
    return tc.tsum(x * w) * (1.0 / denom)


def huber_elementwise(e, delta):
    e = tc.as_tensor(e)
    small = tc.decide(np.abs(e.data) <= delta)
    quad = tc.square(e) * 0.5
    lin = (tc.absolute(e) - 0.5 * delta) * delta
    return tc.where(small, quad, lin)


def huber_point(yhat, y, delta=1.0, weight=None):
    """Mean Huber loss of the error yhat - y."""
    yhat, y = tc.as_tensor(yhat), tc.as_tensor(y)
    if yhat.shape != y.shape:
        raise ValueError(f"huber: shapes {yhat.shape} and {y.shape} do not conform")
    h = huber_elementwise(yhat - y, delta)
    return tc.mean(h) if weight is None else _weighted_mean(h, weight)


def mse_point(yhat, y, weight=None):
    yhat, y = tc.as_tensor(yhat), tc.as_tensor(y)
    if yhat.shape != y.shape:
        raise ValueError(f"mse: shapes {yhat.shape} and {y.shape} do not conform")
    e2 = tc.square(yhat - y)
    return tc.mean(e2) if weight is None else _weighted_mean(e2, weight)


def pinball_elementwise(yhat_q, y, q):
    """q·(y - ŷ) when y >= ŷ else (1 - q)·(ŷ - y); q broadcasts against ŷ."""
    d = tc.as_tensor(y) - tc.as_tensor(yhat_q)
    above = tc.decide(d.data >= 0)
    return tc.where(above, d * q, d * (q - 1.0))


def quantile_loss(yhat_q, y, quantiles, weight=None):
    """Σ over quantiles of the mean pinball loss.

    ``yhat_q`` is (..., |Q|, H) and ``y`` is (..., H); ``weight`` matches ``y``.
    """
    yhat_q = tc.as_tensor(yhat_q)
    q = np.asarray(quantiles, dtype=yhat_q.dtype)
    if yhat_q.shape[-2] != q.size:
        raise ValueError(f"quantile head has {yhat_q.shape[-2]} rows for {q.size} quantiles")
    if q.size == 0:
        return tc.Tensor(np.zeros((), dtype=yhat_q.dtype))
    y = tc.as_tensor(y)
    y_b = tc.reshape(y, y.shape[:-1] + (1, y.shape[-1]))
    loss = pinball_elementwise(yhat_q, y_b, q[:, None])
    if weight is None:
        return tc.tsum(tc.mean(loss, axis=tuple(i for i in range(loss.ndim) if i != loss.ndim - 2)))
    w = np.asarray(weight)[..., None, :]
    denom = float(np.sum(np.broadcast_to(w, y_b.shape)))
    if denom == 0:
        return tc.Tensor(np.zeros((), dtype=yhat_q.dtype))
    return tc.tsum(loss * w) * (1.0 / denom)


def trend_loss(yhat, y, weight=None):
    """Mean squared mismatch of first differences; zero when H < 2."""
    yhat, y = tc.as_tensor(yhat), tc.as_tensor(y)
    if yhat.shape[-1] < 2:
        return tc.Tensor(np.zeros((), dtype=yhat.dtype))
    dy_hat = yhat[..., 1:] - yhat[..., :-1]
    dy = y.data[..., 1:] - y.data[..., :-1]
    e2 = tc.square(dy_hat - dy)
    if weight is None:
        return tc.mean(e2)
    w = np.asarray(weight)
    return _weighted_mean(e2, w[..., 1:] * w[..., :-1])


def moe_aux_loss(stats):
    """(balance, router_z) for one layer's RoutingStats."""
    t = stats.n_tokens
    if t == 0:
        raise ValueError("routing stats hold zero tokens")
    f_bar = stats.counts / (stats.top_k * t)
    p_bar = tc.mean(stats.probs, axis=0)
    balance = tc.tsum(p_bar * f_bar) * float(stats.n_experts)
    z = tc.logsumexp(stats.logits)
    router_z = tc.mean(tc.square(z))
    return balance, router_z


def moe_aux_over_layers(stats_list):
    """Layer-averaged balance and router-z."""
    parts = [moe_aux_loss(s) for s in stats_list if s.n_tokens > 0]
    if not parts:
        zero = tc.Tensor(np.zeros(()))
        return zero, zero
    scale = 1.0 / len(parts)
    balance = parts[0][0]
    router_z = parts[0][1]
    for b, z in parts[1:]:
        balance = balance + b
        router_z = router_z + z
    return balance * scale, router_z * scale


def total_loss(point, quantiles, targets, stats_list, weights: LossWeights, quantile_levels=(),
               weight=None):
    """Weighted composite; point term has unit weight.

    ``point`` is (..., H), ``quantiles`` (..., |Q|, H) or None, ``targets``
    (..., H) on the same normalized scale; ``weight`` masks target positions.
    """
    point = tc.as_tensor(point)
    targets = np.asarray(targets.data if isinstance(targets, tc.Tensor) else targets)
    if point.shape != targets.shape:
        raise ValueError(f"targets {targets.shape} do not match forecasts {point.shape}")
    zero = tc.Tensor(np.zeros((), dtype=point.dtype))
    if weights.mse_point:
        lp = mse_point(point, targets, weight)
    else:
        lp = huber_point(point, targets, weights.delta, weight)
    lq = zero
    if quantiles is not None and len(quantile_levels):
        lq = quantile_loss(quantiles, targets, quantile_levels, weight)
    lt = trend_loss(point, targets, weight)
    if stats_list:
        lb, lz = moe_aux_over_layers(stats_list)
    else:
        lb, lz = zero, zero
    total = lp + lq * weights.lambda_quantile + lt * weights.lambda_trend \
        + (lb + lz) * weights.lambda_moe
    return LossBreakdown(lp, lq, lt, lb, lz, total)
