"""Model-level gradient check and expert-routing statistics."""
from __future__ import annotations

import csv

import numpy as np

from . import tensor_core as tc
from .data import synth_generate
from .input_block import normalize_patches, patchify_batch
from .model import FinCastModel
from .trainer import batch_loss


def gradcheck_model(run_cfg, n_coords=200, seed=0, h=1e-3, tol=1e-4, batch_size=4,
                    context_len=None):
    """Finite-difference check of the full composite loss on random synthetic windows."""
    cfg = run_cfg.model
    context_len = context_len or 2 * cfg.patch_len + cfg.patch_len // 2
    rng = np.random.default_rng(seed)
    model = FinCastModel(cfg, seed=seed)
    total = context_len + cfg.horizon_len
    windows = np.stack([
        synth_generate("ar1", total, seed=seed + i, phi=0.7, level=float(rng.normal(0, 3))).values
        for i in range(batch_size)])
    freq = rng.integers(0, cfg.freq_table_size, batch_size)
    raw, pad = patchify_batch(windows[:, :context_len], cfg.patch_len)
    from .input_block import apply_training_mask
    mask = apply_training_mask(pad, run_cfg.train.mask_ratio, rng)
    weights = run_cfg.effective_loss()

    def f(params):
        parts, _, _ = batch_loss(model, windows, freq, weights, context_len=context_len, mask=mask)
        return parts.total

    return tc.grad_check(f, model.params, h=h, tol=tol, n_coords=n_coords, seed=seed)


def routing_stats(model, contexts, freq_index):
    """Per-layer RoutingStats of one no-grad forward over B×L contexts."""
    cfg = model.config
    raw, mask = patchify_batch(contexts, cfg.patch_len)
    batch = normalize_patches(raw, mask, freq_index)
    with tc.no_grad():
        _, stats = model.forward(batch)
    return stats, batch


def expert_activation(model, contexts, freq_index, chunk=256):
    """Rows of (layer, expert, assignment_fraction, mean_gate_prob)."""
    cfg = model.config
    counts = np.zeros((cfg.n_layers, cfg.n_experts))
    prob_sum = np.zeros((cfg.n_layers, cfg.n_experts))
    tokens = np.zeros(cfg.n_layers)
    freq_index = np.broadcast_to(np.asarray(freq_index), (contexts.shape[0],))
    for i in range(0, contexts.shape[0], chunk):
        stats, _ = routing_stats(model, contexts[i:i + chunk], freq_index[i:i + chunk])
        for layer, s in enumerate(stats):
            counts[layer] += s.counts
            prob_sum[layer] += s.probs.data.sum(axis=0)
            tokens[layer] += s.n_tokens
    rows = []
    k = cfg.active_top_k
    for layer in range(cfg.n_layers):
        for e in range(cfg.n_experts):
            rows.append({
                "layer": layer, "expert": e,
                "assignment_fraction": counts[layer, e] / max(k * tokens[layer], 1),
                "mean_gate_prob": prob_sum[layer, e] / max(tokens[layer], 1),
            })
    return rows


def write_expert_csv(rows, fh):
    w = csv.writer(fh)
    w.writerow(["layer", "expert", "assignment_fraction", "mean_gate_prob"])
    for r in rows:
        w.writerow([r["layer"], r["expert"], f"{r['assignment_fraction']:.6f}",
                    f"{r['mean_gate_prob']:.6f}"])


def assignment_by_label(model, contexts, freq_index, token_labels):
    """Expert-assignment distributions per layer conditioned on a token label.

    ``token_labels`` is B×N; negative labels are ignored. Returns
    {layer: {label: distribution over experts}}.
    """
    cfg = model.config
    stats, _ = routing_stats(model, contexts, freq_index)
    flat = np.asarray(token_labels).reshape(-1)
    out = {}
    for layer, s in enumerate(stats):
        labels = flat[s.token_index]
        dists = {}
        for lab in np.unique(labels[labels >= 0]):
            rows = s.chosen[labels == lab].reshape(-1)
            c = np.bincount(rows, minlength=cfg.n_experts).astype(float)
            dists[int(lab)] = c / c.sum()
        out[layer] = dists
    return out


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def max_pairwise_tv(dists):
    labels = sorted(dists)
    best = 0.0
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            best = max(best, total_variation(dists[a], dists[b]))
    return best
