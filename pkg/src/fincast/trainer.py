"""AdamW training loop with warmup / plateau / cosine schedule."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .input_block import apply_training_mask, normalize_patches, patchify_batch
from .loss import LossWeights, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "point", "quantile", "trend", "balance", "router_z", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 2e-4
    weight_decay: float = 0.05
    total_steps: int = 1000
    warmup_frac: float = 0.05
    plateau_frac: float = 0.30
    final_lr_frac: float = 0.10
    batch_size: int = 32
    mask_ratio: float = 0.15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    context_len: int = 128

    def __post_init__(self):
        for name in ("warmup_frac", "plateau_frac", "final_lr_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.warmup_frac + self.plateau_frac > 1.0:
            raise ValueError("warmup_frac + plateau_frac must not exceed 1")
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")


def lr_at(step, cfg: TrainConfig):
    """Linear warmup, flat plateau, cosine decay to final_lr_frac·peak at total_steps."""
    s = float(cfg.total_steps)
    peak = cfg.lr_peak
    warm_end = cfg.warmup_frac * s
    flat_end = (cfg.warmup_frac + cfg.plateau_frac) * s
    if step <= warm_end:
        return peak * step / warm_end if warm_end > 0 else peak
    if step <= flat_end:
        return peak
    final = cfg.final_lr_frac * peak
    span = s - flat_end
    progress = min((step - flat_end) / span, 1.0) if span > 0 else 1.0
    return final + (peak - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params, grads, state: OptimizerState, lr, cfg: TrainConfig):
    """One decoupled-weight-decay Adam update in place. Returns False if skipped."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped (%d so far)",
                    state.step + 1, state.skipped)
        return False
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.data.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return True


def clip_grad_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------------------
# data and per-batch loss

@dataclass
class WindowDataset:
    """Fixed-length windows: context followed by the next ``horizon`` points."""

    windows: np.ndarray          # M×(context + horizon)
    freq_index: np.ndarray       # M
    context_len: int
    labels: np.ndarray | None = None   # M×context regime labels, optional

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.freq_index = np.asarray(self.freq_index, dtype=np.int64)
        if self.windows.ndim != 2 or self.windows.shape[0] == 0:
            raise ValueError("dataset holds no windows")
        if self.freq_index.shape != (self.windows.shape[0],):
            raise ValueError("one freq_index per window required")

    def __len__(self):
        return self.windows.shape[0]

    @property
    def horizon(self):
        return self.windows.shape[1] - self.context_len


def token_targets(windows, context_len, patch_len, horizon):
    """For every context patch, the ``horizon`` values right after it (B×N×H)."""
    n = math.ceil(context_len / patch_len)
    pad = n * patch_len - context_len
    ends = (np.arange(1, n + 1) * patch_len - pad)
    idx = ends[:, None] + np.arange(horizon)[None, :]
    return windows[:, idx]


def eligible_tokens(batch, min_observed):
    """Tokens whose own patch gives usable target statistics."""
    observed = (1.0 - batch.mask).sum(-1)
    return (~batch.degenerate) & (observed >= min_observed) & (batch.sigma > 1e-6)


def batch_loss(model, windows, freq_index, weights: LossWeights, rng=None, mask_ratio=0.0,
               context_len=None, mask=None):
    """Composite loss of a window batch. Returns (LossBreakdown, routing stats, batch)."""
    cfg = model.config
    windows = np.asarray(windows, dtype=np.float64)
    context_len = context_len or windows.shape[1] - cfg.horizon_len
    if windows.shape[1] < context_len + cfg.horizon_len:
        raise ValueError("windows are shorter than context + horizon")
    raw, pad_mask = patchify_batch(windows[:, :context_len], cfg.patch_len)
    if mask is None:
        mask = apply_training_mask(pad_mask, mask_ratio, rng) if mask_ratio > 0 else pad_mask
    batch = normalize_patches(raw, mask, freq_index)
    out, stats = model.forward(batch)
    targets = token_targets(windows, context_len, cfg.patch_len, cfg.horizon_len)
    targets = (targets - batch.mu[..., None]) / batch.sigma[..., None]
    ok = eligible_tokens(batch, max(1, cfg.patch_len // 2))
    weight = np.broadcast_to(ok[..., None].astype(np.float64), targets.shape)
    quant = out.quantiles if len(cfg.quantile_levels) else None
    parts = total_loss(out.point, quant, targets, stats, weights, cfg.quantile_levels, weight)
    return parts, stats, batch


# ---------------------------------------------------------------------------
# loop

class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: object
    log: list
    state: OptimizerState
    checkpoints: list = field(default_factory=list)


def train(model, dataset: WindowDataset, cfg: TrainConfig, weights: LossWeights,
          out_path=None, run_config=None, log_path=None, callback=None):
    """Run ``cfg.total_steps`` AdamW steps on random batches of ``dataset``.

    With ``out_path`` a checkpoint (weights, optimizer state, loss log) is
    written every ``checkpoint_every`` steps and at the end. A non-finite
    loss aborts with :class:`TrainingError` after restoring the last good
    parameters.
    """
    from .weights import save_weights

    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    for p in params.values():
        p.requires_grad = True
    state = OptimizerState.zeros_like(params)
    rows, saved = [], []
    good = {k: p.data.copy() for k, p in params.items()}

    def checkpoint(step):
        if out_path is None:
            return
        save_weights(model, out_path)
        np.savez(str(out_path) + ".opt.npz", step=state.step, skipped=state.skipped,
                 **{f"m.{k}": v for k, v in state.m.items()},
                 **{f"v.{k}": v for k, v in state.v.items()})
        if run_config is not None:
            with open(str(out_path) + ".cfg", "w", encoding="utf-8") as fh:
                fh.write(run_config.dump())
        write_loss_log(log_path or str(out_path) + ".loss.csv", rows)
        saved.append(step)

    for step in range(1, cfg.total_steps + 1):
        lr = lr_at(step, cfg)
        pick = rng.integers(0, len(dataset), size=cfg.batch_size)
        with tc.GradTape() as tape:
            parts, _, _ = batch_loss(model, dataset.windows[pick], dataset.freq_index[pick],
                                     weights, rng, cfg.mask_ratio, dataset.context_len)
            total = parts.total
            if not np.isfinite(total.data):
                for k, p in params.items():
                    p.data[...] = good[k]
                raise TrainingError(f"non-finite loss at step {step}; last good step "
                                    f"{saved[-1] if saved else 0}")
            grads = tape.backward(total, params)
        clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(params, grads, state, lr, cfg)
        row = {"step": step, **parts.values(), "lr": lr}
        rows.append(row)
        if callback is not None:
            callback(row)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            good = {k: p.data.copy() for k, p in params.items()}
            checkpoint(step)
    good = {k: p.data.copy() for k, p in params.items()}
    if out_path is not None and (not saved or saved[-1] != cfg.total_steps):
        checkpoint(cfg.total_steps)
    elif log_path is not None:
        write_loss_log(log_path, rows)
    return TrainResult(model, rows, state, saved)


def write_loss_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k])
                        for k in LOG_COLUMNS})


def load_optimizer_state(path, params):
    data = np.load(path)
    state = OptimizerState({k: data[f"m.{k}"].copy() for k in params},
                           {k: data[f"v.{k}"].copy() for k in params},
                           int(data["step"]), int(data["skipped"]))
    return state
