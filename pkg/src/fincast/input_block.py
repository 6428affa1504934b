"""Patch tokenization: padding, masking, per-patch normalization, embedding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor_core as tc

EPS_SIGMA = 1e-6

FREQ_INDEX = {
    "second": 0,
    "minute": 1,
    "hourly": 2,
    "daily": 3,
    "weekly": 4,
    "monthly": 5,
}


def freq_to_index(freq) -> int:
    if isinstance(freq, (int, np.integer)):
        return int(freq)
    key = str(freq).strip().lower()
    aliases = {"s": "second", "sec": "second", "min": "minute", "1min": "minute",
               "h": "hourly", "hour": "hourly", "1h": "hourly", "d": "daily", "day": "daily",
               "1d": "daily", "w": "weekly", "week": "weekly", "1wk": "weekly",
               "m": "monthly", "month": "monthly", "1mo": "monthly"}
    key = aliases.get(key, key)
    if key.isdigit():
        return int(key)
    if key not in FREQ_INDEX:
        raise ValueError(f"unknown frequency {freq!r}; expected one of {sorted(FREQ_INDEX)}")
    return FREQ_INDEX[key]


@dataclass
class Series:
    values: np.ndarray
    timestamps: np.ndarray | None = None
    freq_index: int = 3
    name: str = "value"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("a series needs at least one value")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps)
            if self.timestamps.shape != self.values.shape:
                raise ValueError("timestamps and values differ in length")
            if np.any(np.diff(self.timestamps) <= 0):
                raise ValueError("timestamps must be strictly increasing")
        if self.freq_index < 0:
            raise ValueError("freq_index must be nonnegative")

    def __len__(self):
        return self.values.size


@dataclass
class PatchBatch:
    """Normalized patches with the statistics needed to undo the normalization."""

    patches: np.ndarray      # B×N×P, zero where masked
    mask: np.ndarray         # B×N×P, 1 = masked
    mu: np.ndarray           # B×N
    sigma: np.ndarray        # B×N
    freq_index: np.ndarray   # B
    degenerate: np.ndarray   # B×N, patch had no observed value

    @property
    def shape(self):
        return self.patches.shape

    def token_valid(self):
        """Tokens with at least one observed value."""
        return ~self.degenerate


def patchify(values, patch_len):
    """Split a 1-D array into ceil(L/P) patches, left-padding the first.

    Returns (patches N×P, pad mask N×P) with pad positions masked and zeroed.
    """
    values = np.asarray(values, dtype=np.float64)
    if patch_len < 1:
        raise ValueError("patch length must be >= 1")
    if values.ndim != 1 or values.size == 0:
        raise ValueError("cannot patchify an empty series")
    n = math.ceil(values.size / patch_len)
    pad = n * patch_len - values.size
    raw = np.concatenate([np.zeros(pad), values]).reshape(n, patch_len)
    mask = np.zeros((n, patch_len))
    mask.reshape(-1)[:pad] = 1.0
    return raw, mask


def patchify_batch(contexts, patch_len):
    """Patchify equal-length rows of a B×L array."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    b, length = contexts.shape
    if length == 0:
        raise ValueError("cannot patchify an empty series")
    n = math.ceil(length / patch_len)
    pad = n * patch_len - length
    raw = np.concatenate([np.zeros((b, pad)), contexts], axis=1).reshape(b, n, patch_len)
    mask = np.zeros((b, n * patch_len))
    mask[:, :pad] = 1.0
    return raw, mask.reshape(b, n, patch_len)


def sample_prefix_lengths(n_seq, length, ratio, rng):
    """Masked-prefix lengths with mean ``ratio * length``, always < length.

    The length is uniform on {0..m} with m chosen so the mean hits the target;
    the remainder of a non-integer 2·ratio·L goes to a Bernoulli on m+1.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    if ratio == 0.0 or length <= 1:
        return np.zeros(n_seq, dtype=np.int64)
    target = ratio * length
    # uniform on {0..m} has mean m/2; mix m and m+1 to match a fractional 2·target
    span = 2.0 * target
    m = int(math.floor(span))
    frac = span - m
    tops = m + (rng.random(n_seq) < frac).astype(np.int64)
    lengths = np.floor(rng.random(n_seq) * (tops + 1)).astype(np.int64)
    return np.minimum(lengths, length - 1)


def apply_training_mask(mask, ratio, rng):
    """OR a random-length masked prefix into each sequence of a B×N×P mask.

    The prefix is counted over the not-yet-padded positions, so the observed
    tail of every sequence keeps at least one point.
    """
    mask = np.array(mask, dtype=np.float64, copy=True)
    if ratio == 0.0:
        return mask
    b, n, p = mask.shape
    flat = mask.reshape(b, n * p)
    pad = flat.sum(axis=1).astype(np.int64)
    observed = n * p - pad
    lengths = np.zeros(b, dtype=np.int64)
    for i in range(b):
        lengths[i] = sample_prefix_lengths(1, int(observed[i]), ratio, rng)[0]
    pos = np.arange(n * p)
    newly = (pos[None, :] >= pad[:, None]) & (pos[None, :] < (pad + lengths)[:, None])
    flat[newly] = 1.0
    return flat.reshape(b, n, p)


def instance_normalize(patch, mask_row=None, eps=EPS_SIGMA):
    """Normalize one patch over its non-masked entries.

    Returns (normalized, mu, sigma, degenerate). Masked entries come back as 0.
    An all-masked patch uses mu=0, sigma=1 and reports degenerate=True.
    """
    patch = np.asarray(patch, dtype=np.float64)
    mask_row = np.zeros_like(patch) if mask_row is None else np.asarray(mask_row, dtype=np.float64)
    mu, sigma, deg = _kernels.patch_stats(patch[None, None], mask_row[None, None], eps)
    mu, sigma, deg = float(mu[0, 0]), float(sigma[0, 0]), bool(deg[0, 0])
    out = (patch - mu) / sigma * (1.0 - mask_row)
    return out, mu, sigma, deg


def normalize_patches(raw, mask, freq_index, eps=EPS_SIGMA):
    """Batch form of :func:`instance_normalize`; returns a PatchBatch."""
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    mu, sigma, deg = _kernels.patch_stats(raw, mask, eps)
    normed = (raw - mu[..., None]) / sigma[..., None] * (1.0 - mask)
    freq = np.broadcast_to(np.asarray(freq_index, dtype=np.int64), (raw.shape[0],)).copy()
    return PatchBatch(normed, mask, mu, sigma, freq, deg)


def denormalize_values(x, mu, sigma):
    return np.asarray(x) * sigma + mu


def embed_tokens(batch: PatchBatch, params, use_freq=True):
    """Residual MLP per patch plus the sequence's frequency embedding.

    The block sees the masked normalized values alongside the mask itself,
    so a true zero and a masked slot are distinguishable.
    """
    table = params["input.freq_table"]
    rows = table.shape[0]
    bad = batch.freq_index[(batch.freq_index < 0) | (batch.freq_index >= rows)]
    if bad.size:
        raise ValueError(f"freq_index {int(bad[0])} out of range for a table of {rows} rows")
    dtype = params["input.w_hidden"].dtype
    x = tc.Tensor(np.concatenate([batch.patches * (1.0 - batch.mask), batch.mask], axis=-1)
                  .astype(dtype, copy=False))
    hidden = tc.silu(x @ params["input.w_hidden"] + params["input.b_hidden"])
    h = hidden @ params["input.w_out"] + params["input.b_out"] + x @ params["input.w_skip"]
    if use_freq:
        freq_vec = tc.take_rows(table, batch.freq_index)       # B×D
        h = h + tc.reshape(freq_vec, (freq_vec.shape[0], 1, freq_vec.shape[1]))
    return h
