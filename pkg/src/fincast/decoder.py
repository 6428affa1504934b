"""Pre-norm decoder blocks: RMSNorm, causal attention, token-level sparse MoE."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor_core as tc

MASK_VALUE = -1e9
LOG2E = math.log2(math.e)


def rmsnorm(h, gamma, eps=1e-6):
    h = tc.as_tensor(h)
    ms = tc.mean(tc.square(h), axis=-1, keepdims=True)
    return h / tc.sqrt(ms + eps) * gamma


def attention_mask(n_query, n_key, key_valid=None, offset=0):
    """Additive mask: query i (absolute position offset+i) sees keys j <= offset+i.

    ``key_valid`` (B×n_key) removes keys with no observed data; a query always
    keeps itself so no row is empty.
    """
    q_pos = offset + np.arange(n_query)[:, None]
    k_pos = np.arange(n_key)[None, :]
    allowed = k_pos <= q_pos
    if key_valid is None:
        return np.where(allowed, 0.0, MASK_VALUE)[None, None]
    allowed = allowed[None] & (key_valid[:, None, :] | (k_pos == q_pos)[None])
    return np.where(allowed, 0.0, MASK_VALUE)[:, None]


@dataclass
class KVCache:
    """Keys/values of already-decoded tokens for one layer (B×H×N×d)."""

    k: np.ndarray | None = None
    v: np.ndarray | None = None

    @property
    def length(self):
        return 0 if self.k is None else self.k.shape[2]


def causal_attention(h_norm, params, prefix, n_heads, mask=None, cache=None):
    """Multi-head causal self-attention with per-dimension query scaling.

    With ``cache`` the new tokens attend to the cached keys/values followed by
    their own; the cache is extended in place. ``mask`` is an additive mask
    broadcastable to B×H×N_new×N_total.
    """
    b, n, d = h_norm.shape
    hd = d // n_heads
    qkv = h_norm @ params[prefix + "w_qkv"]                          # B×N×3D
    qkv = tc.transpose(tc.reshape(qkv, (b, n, 3, n_heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]                                 # B×H×N×hd
    scale = tc.softplus(params[prefix + "alpha"]) * (LOG2E / math.sqrt(hd))
    q = q * scale
    offset = 0
    if cache is not None:
        offset = cache.length
        if offset:
            k = tc.concat([tc.Tensor(cache.k), k], axis=2)
            v = tc.concat([tc.Tensor(cache.v), v], axis=2)
        cache.k, cache.v = k.data, v.data
    if mask is None:
        mask = attention_mask(n, offset + n, offset=offset)
    scores = q @ tc.transpose(k, (0, 1, 3, 2)) + mask.astype(q.dtype, copy=False)
    probs = tc.softmax(scores)
    ctx = probs @ v                                                  # B×H×N×hd
    ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return ctx @ params[prefix + "w_o"]


@dataclass
class RoutingStats:
    """Per-layer routing record for one forward pass."""

    n_experts: int
    top_k: int
    counts: np.ndarray                  # E, assignments over valid tokens
    logits: tc.Tensor                   # T×E gate logits (valid tokens only)
    probs: tc.Tensor                    # T×E softmax of logits
    chosen: np.ndarray                  # T×k expert indices
    token_index: np.ndarray = field(default=None)  # flat B·N index of each row

    @property
    def n_tokens(self):
        return self.chosen.shape[0]

    def assignment_fraction(self):
        return self.counts / max(self.top_k * self.n_tokens, 1)

    def mean_gate_prob(self):
        return self.probs.data.mean(axis=0) if self.n_tokens else np.zeros(self.n_experts)


def moe_gate(h_n, w_gate, k):
    """Top-k gates for token vectors h_n (T×D).

    Returns (gates T×E, chosen T×k, logits, probs). Retained gates keep their
    softmax values; the rest are zero. Ties go to the lowest index.
    """
    h_n = tc.as_tensor(h_n)
    squeeze = h_n.ndim == 1
    if squeeze:
        h_n = tc.reshape(h_n, (1, h_n.shape[0]))
    e = w_gate.shape[-1]
    if not 1 <= k <= e:
        raise ValueError(f"top_k must satisfy 1 <= k <= E, got k={k}, E={e}")
    logits = h_n @ w_gate
    probs = tc.softmax(logits)
    chosen = tc.decide(_kernels.topk_indices(probs.data, k))
    keep = np.zeros(probs.shape, dtype=probs.dtype)
    np.put_along_axis(keep, chosen, 1.0, axis=-1)
    gates = probs * keep
    if squeeze:
        return gates[0], chosen[0], logits[0], probs[0]
    return gates, chosen, logits, probs


def expert_mlp(x, params, prefix):
    hidden = tc.silu(x @ params[prefix + "w1"] + params[prefix + "b1"])
    return hidden @ params[prefix + "w2"] + params[prefix + "b2"]


def moe_forward(h, params, prefix, n_experts, top_k, token_valid=None):
    """h + Σ_i g_i · MLP_i(RMSNorm(h)) with only routed tokens sent to each expert."""
    b, n, d = h.shape
    x = tc.reshape(rmsnorm(h, params[prefix + "gamma"]), (b * n, d))
    gates, chosen, logits, probs = moe_gate(x, params[prefix + "w_gate"], top_k)
    flat_valid = (np.ones(b * n, dtype=bool) if token_valid is None
                  else np.asarray(token_valid, dtype=bool).reshape(-1))
    out = None
    for i in range(n_experts):
        rows = np.flatnonzero((chosen == i).any(axis=1))
        if rows.size == 0:
            continue
        if rows.size == 1:
            # BLAS takes a gemv path for a single row whose rounding differs from
            # gemm; a duplicate row keeps every token's output independent of how
            # many other tokens share its expert
            y = expert_mlp(tc.take_rows(x, np.repeat(rows, 2)), params, f"{prefix}expert{i}.")[:1]
        else:
            y = expert_mlp(tc.take_rows(x, rows), params, f"{prefix}expert{i}.")
        g = tc.reshape(tc.take_rows(gates, rows)[:, i], (rows.size, 1))
        part = tc.scatter_rows(b * n, rows, y * g)
        out = part if out is None else out + part
    valid_rows = np.flatnonzero(flat_valid)
    counts = np.bincount(chosen[valid_rows].reshape(-1), minlength=n_experts).astype(np.float64)
    if valid_rows.size == b * n:
        s_logits, s_probs = logits, probs
    else:
        s_logits, s_probs = tc.take_rows(logits, valid_rows), tc.take_rows(probs, valid_rows)
    stats = RoutingStats(n_experts, top_k, counts, s_logits, s_probs,
                         chosen[valid_rows], valid_rows)
    if out is None:
        return h, stats
    return h + tc.reshape(out, (b, n, d)), stats


def decoder_block(h, params, layer, cfg, mask=None, token_valid=None, cache=None):
    prefix = f"blocks.{layer}."
    a = causal_attention(rmsnorm(h, params[prefix + "attn.gamma"]), params, prefix + "attn.",
                         cfg.n_heads, mask=mask, cache=cache)
    h = h + a
    return moe_forward(h, params, prefix + "moe.", cfg.n_experts, cfg.active_top_k,
                       token_valid=token_valid)


def decoder_stack(h, params, cfg, mask=None, token_valid=None, caches=None):
    """Apply every block in order; returns (h', list of per-layer RoutingStats)."""
    if cfg.n_layers < 1:
        raise ValueError("decoder needs at least one block")
    stats = []
    for layer in range(cfg.n_layers):
        cache = caches[layer] if caches is not None else None
        h, s = decoder_block(h, params, layer, cfg, mask=mask, token_valid=token_valid,
                             cache=cache)
        stats.append(s)
    return h, stats


def merge_stats(stats_list):
    """Per-layer totals: (counts L×E, mean gate prob L×E, token counts L)."""
    counts = np.stack([s.counts for s in stats_list])
    probs = np.stack([s.mean_gate_prob() for s in stats_list])
    tokens = np.array([s.n_tokens for s in stats_list])
    return counts, probs, tokens
