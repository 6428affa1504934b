"""End-to-end acceptance checks, one test per criterion.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python
tests/test_acceptance.py``); the terminal summary prints one PASS/FAIL line
per criterion with the measured numbers.
"""
import math
import sys
import time

import numpy as np
import pytest

from conftest import record
from fincast import tensor_core as tc
from fincast.config import RunConfig
from fincast.data import make_windows, synth_generate
from fincast.decoder import RoutingStats, moe_forward, moe_gate
from fincast.diagnostics import (assignment_by_label, expert_activation, gradcheck_model,
                                 max_pairwise_tv)
from fincast.inference import forecast, forecast_batch, forecast_multichannel
from fincast.input_block import denormalize_values, normalize_patches, patchify_batch
from fincast.loss import LossWeights, huber_point, moe_aux_loss, pinball_elementwise, trend_loss
from fincast.model import FinCastModel, ModelConfig
from fincast.trainer import TrainConfig, WindowDataset, lr_at, train

TINY = dict(d_model=32, n_layers=2, n_heads=4, n_experts=4, top_k=2, expert_hidden=64,
            patch_len=16)


# ---------------------------------------------------------------------------
# 1. gradient correctness

def test_01_gradient_check():
    cfg = RunConfig(model=ModelConfig(**TINY, horizon_len=16))
    t0 = time.perf_counter()
    rep = gradcheck_model(cfg, n_coords=500, seed=0, h=1e-3, tol=1e-4)
    dt = time.perf_counter() - t0
    ok = rep.passed and len(rep.coords) == 500 and dt < 120
    record(1, "gradient check", ok,
           f"500 coords, max rel err {rep.max_rel_err:.2e} (< 1e-4), {dt:.1f}s (< 120s)")
    assert rep.passed, rep.summary()
    assert len(rep.coords) == 500
    assert dt < 120


# ---------------------------------------------------------------------------
# 2. causality

def test_02_causality():
    cfg = ModelConfig(**TINY, horizon_len=16)
    model = FinCastModel(cfg, seed=3)
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0
    for trial in range(20):
        n_tok = int(rng.integers(3, 9))
        ctx = rng.normal(rng.normal(0, 5), rng.uniform(0.1, 4), (1, n_tok * 16 - int(rng.integers(0, 16))))
        raw, mask = patchify_batch(ctx, 16)
        freq = int(rng.integers(0, 8))
        with tc.no_grad():
            base, _ = model.forward(normalize_patches(raw, mask, freq))
            for j in range(1, n_tok):
                raw2 = raw.copy()
                raw2[0, j] += rng.normal(0, 3, 16) * (1 - mask[0, j])
                out, _ = model.forward(normalize_patches(raw2, mask, freq))
                same = (np.array_equal(out.point.data[:, :j], base.point.data[:, :j])
                        and np.array_equal(out.quantiles.data[:, :j], base.quantiles.data[:, :j]))
                changed = not np.array_equal(out.point.data[:, j], base.point.data[:, j])
                if not same:
                    worst += 1
                assert changed, "perturbation did not reach its own position"
    dt = time.perf_counter() - t0
    record(2, "causality", worst == 0 and dt < 60,
           f"20 inputs, {worst} positions < j changed (bit-exact), {dt:.1f}s")
    assert worst == 0
    assert dt < 60


# ---------------------------------------------------------------------------
# 3. normalization round trip

def test_03_normalization_round_trip():
    rng = np.random.default_rng(3)
    n, p = 10_000, 16
    raw = rng.normal(0, 1, (n, p)) * rng.uniform(1e-3, 50, (n, 1)) + rng.normal(0, 100, (n, 1))
    raw[::10] = rng.normal(0, 10, (n // 10, 1))          # constant patches, sigma floored
    mask = (rng.random((n, p)) < 0.2).astype(float)
    mask[::7] = 0.0
    mask[::7, : p // 2] = 1.0
    batch = normalize_patches(raw[:, None, :], mask[:, None, :], 3)
    back = denormalize_values(batch.patches, batch.mu[..., None], batch.sigma[..., None])[:, 0]
    obs = mask == 0
    err = float(np.max(np.abs(back[obs] - raw[obs])))
    const_ok = bool(np.all(batch.sigma[::10, 0] == 1e-6))
    record(3, "normalization round trip", err <= 1e-12 and const_ok,
           f"10^4 patches, max |error| {err:.1e} (<= 1e-12), constant patches floored: {const_ok}")
    assert err <= 1e-12
    assert const_ok


# ---------------------------------------------------------------------------
# 4. gating contract

def test_04_gating_contract():
    rng = np.random.default_rng(4)
    problems = []
    for e in (2, 4, 8):
        for k in range(1, e + 1):
            h = rng.normal(0, 1, (64, 8))
            w = rng.normal(0, 1, (8, e))
            gates, chosen, logits, probs = moe_gate(tc.Tensor(h), tc.Tensor(w), k)
            g = gates.data
            nz = np.count_nonzero(g, axis=1)
            if not np.all(nz == k):
                problems.append(f"E={e} k={k}: nonzero counts {set(nz)}")
            sm = np.exp(logits.data - logits.data.max(1, keepdims=True))
            sm /= sm.sum(1, keepdims=True)
            kept = g != 0
            if np.max(np.abs(g[kept] - sm[kept])) > 1e-12:
                problems.append(f"E={e} k={k}: gates differ from softmax")
    # assignment conservation inside a real block
    cfg = ModelConfig(**TINY, horizon_len=16)
    model = FinCastModel(cfg, seed=1)
    h = tc.Tensor(rng.normal(0, 1, (3, 5, 32)))
    _, stats = moe_forward(h, model.params, "blocks.0.moe.", 4, 2)
    conserved = stats.counts.sum() == 2 * 15
    gates, *_ = moe_gate(tc.Tensor(np.array([[2.0, 1.0, 0.0, -1.0]])), tc.Tensor(np.eye(4)), 2)
    worked = np.max(np.abs(gates.data[0] - [0.643914, 0.236883, 0.0, 0.0]))
    ok = not problems and conserved and worked <= 1e-6
    record(4, "gating contract", ok,
           f"k nonzero / softmax-equal: {not problems}; sum counts = k*T: {conserved}; "
           f"worked example |err| {worked:.1e}")
    assert not problems, problems
    assert conserved
    assert worked <= 1e-6


# ---------------------------------------------------------------------------
# 5. loss oracles

def test_05_loss_oracles():
    rng = np.random.default_rng(5)
    y, yq = rng.normal(0, 2, 1000), rng.normal(0, 2, 1000)
    pin = float(pinball_elementwise(tc.Tensor(yq), tc.Tensor(y), 0.5).data.mean())
    mae = float(np.mean(np.abs(y - yq)))
    pin_err = abs(pin - 0.5 * mae)

    # C1 at |e| = delta: values and one-sided slopes meet from both sides
    def value_and_slope(e):
        x = tc.Tensor(np.array([e]), requires_grad=True)
        with tc.GradTape() as tape:
            v = huber_point(x, np.zeros(1), delta=1.0)
            g = tape.backward(v, {"x": x})["x"][0]
        return float(v.data), float(g)
    c1 = 0.0
    for sign in (1.0, -1.0):
        v_in, g_in = value_and_slope(sign * (1.0 - 1e-9))
        v_out, g_out = value_and_slope(sign * (1.0 + 1e-9))
        c1 = max(c1, abs(v_in - v_out), abs(g_in - g_out))

    # dyadic values keep the shifted differences exact in floating point
    a = rng.integers(-2**20, 2**20, (4, 32)) / 1024.0
    b = rng.integers(-2**20, 2**20, (4, 32)) / 1024.0
    base = float(trend_loss(tc.Tensor(a), tc.Tensor(b)).data)
    shifted = float(trend_loss(tc.Tensor(a + 37.0), tc.Tensor(b - 11.0)).data)
    trend_exact = base == shifted

    e, t = 4, 200
    chosen = np.stack([np.arange(t) % e, (np.arange(t) + 1) % e], axis=1)
    uni = RoutingStats(e, 2, np.bincount(chosen.reshape(-1), minlength=e).astype(float),
                       tc.Tensor(np.zeros((t, e))), tc.Tensor(np.full((t, e), 1.0 / e)), chosen)
    bal, rz = moe_aux_loss(uni)
    bal_err = abs(float(bal.data) - 1.0)
    rz_err = abs(float(rz.data) - math.log(e) ** 2)
    ok = pin_err <= 1e-12 and c1 < 1e-8 and trend_exact and bal_err <= 1e-9 and rz_err <= 1e-9
    record(5, "loss oracles", ok,
           f"pinball-1/2MAE {pin_err:.1e}; Huber jump at delta {c1:.1e}; trend shift exact "
           f"{trend_exact}; balance-1 {bal_err:.1e}; router_z-(ln E)^2 {rz_err:.1e}")
    assert pin_err <= 1e-12
    assert c1 < 1e-8
    assert trend_exact
    assert bal_err <= 1e-9 and rz_err <= 1e-9


# ---------------------------------------------------------------------------
# 6. smoke training on sinusoids

def _sinusoid_mix(seed, length):
    rng = np.random.default_rng(seed)
    return synth_generate("sinusoid", length, seed, periods=(20.0, 50.0),
                          amplitudes=tuple(rng.uniform(0.5, 1.5, 2)),
                          level=float(rng.uniform(-2, 2))).values


def test_06_smoke_training():
    ctx, h = 96, 32
    train_w = []
    for s in range(16):
        c, t = make_windows(_sinusoid_mix(s, 1200), ctx, h, 4)
        train_w.append(np.concatenate([c, t], axis=1))
    train_w = np.concatenate(train_w)
    cfg = ModelConfig(**TINY, horizon_len=32)
    model = FinCastModel(cfg, seed=0)
    tcfg = TrainConfig(lr_peak=3e-3, total_steps=1000, batch_size=16, context_len=ctx, seed=0)
    t0 = time.perf_counter()
    train(model, WindowDataset(train_w, np.full(len(train_w), 3), ctx), tcfg, LossWeights())
    ctxs, tgts = zip(*(make_windows(_sinusoid_mix(s, 600), ctx, h, 16) for s in range(100, 110)))
    ctxs, tgts = np.concatenate(ctxs), np.concatenate(tgts)
    fc = forecast_batch(model, ctxs, h, 3)
    dt = time.perf_counter() - t0
    mse = float(np.mean((fc.point - tgts) ** 2))
    naive = float(np.mean((ctxs[:, -1:] - tgts) ** 2))
    ratio = mse / naive
    ok = ratio < 0.1 and model.n_parameters <= 300_000 and dt < 600
    record(6, "smoke training", ok,
           f"{model.n_parameters} params, 1000 steps, MSE/naive at h=32 = {ratio:.4f} (< 0.1), "
           f"{dt:.0f}s")
    assert model.n_parameters <= 300_000
    assert ratio < 0.1
    assert dt < 600


# ---------------------------------------------------------------------------
# 7. quantile calibration on AR(1) + noise

def _ar1_noisy(seed, length):
    noise = np.random.default_rng(seed + 999).standard_normal(length)
    return synth_generate("ar1", length, seed, phi=0.8, noise=1.0).values + 0.5 * noise


def test_07_quantile_calibration():
    ctx, h = 96, 16
    train_w = []
    for s in range(20):
        c, t = make_windows(_ar1_noisy(s, 2000), ctx, h, 2)
        train_w.append(np.concatenate([c, t], axis=1))
    train_w = np.concatenate(train_w)
    cfg = ModelConfig(**TINY, horizon_len=h, quantiles=(0.1, 0.5, 0.9))
    model = FinCastModel(cfg, seed=0)
    tcfg = TrainConfig(lr_peak=3e-3, total_steps=1000, batch_size=32, context_len=ctx, seed=0)
    train(model, WindowDataset(train_w, np.full(len(train_w), 3), ctx), tcfg, LossWeights())
    ctxs, tgts = zip(*(make_windows(_ar1_noisy(s, 2000), ctx, h, 16) for s in range(100, 120)))
    ctxs, tgts = np.concatenate(ctxs), np.concatenate(tgts)
    fc = forecast_batch(model, ctxs, h, 3)
    cov = [float(np.mean(tgts <= fc.quantiles[:, j, :])) for j in range(3)]
    gaps = [abs(c - q) for c, q in zip(cov, (0.1, 0.5, 0.9))]
    ok = len(ctxs) >= 2000 and max(gaps) <= 0.07
    record(7, "quantile calibration", ok,
           f"{len(ctxs)} windows, coverage q10/q50/q90 = "
           + "/".join(f"{c:.3f}" for c in cov) + " (within 0.07)")
    assert len(ctxs) >= 2000
    assert max(gaps) <= 0.07, cov


# ---------------------------------------------------------------------------
# 8 + 9. regime mixture: ablation directionality and expert specialization

CTX, H_REG, SEEDS, REG_STEPS = 96, 16, (0, 1, 2), 800
SOURCES = (
    dict(phis=(0.95, -0.5, 0.5), noises=(0.5, 1.0, 2.0), means=(0.0, 3.0, -3.0)),
    dict(phis=(0.9, 0.0, -0.8), noises=(1.0, 0.3, 1.0), means=(1.0, -1.0, 0.0)),
    dict(phis=(0.99, 0.6, -0.3), noises=(0.2, 1.5, 0.7), means=(0.0, 0.0, 2.0)),
)
SOURCE_FREQ = (1, 2, 3)


def _regime_windows(seed0, n_series, length, stride):
    w, f, lab = [], [], []
    for si, src in enumerate(SOURCES):
        for k in range(n_series):
            s = synth_generate("regime_ar", length, seed0 + 100 * si + k, stay=0.98, **src)
            c, t = make_windows(s.values, CTX, H_REG, stride)
            lc, _ = make_windows(s.meta["regimes"].astype(float), CTX, H_REG, stride)
            w.append(np.concatenate([c, t], axis=1))
            f.append(np.full(len(c), SOURCE_FREQ[si]))
            lab.append(lc)
    return np.concatenate(w), np.concatenate(f), np.concatenate(lab).astype(np.int64)


@pytest.fixture(scope="module")
def regime_runs():
    train_w, train_f, _ = _regime_windows(0, 6, 1500, 2)
    test_w, test_f, test_lab = _regime_windows(5000, 3, 800, 8)
    dataset = WindowDataset(train_w, train_f, CTX)
    ctxs, tgts = test_w[:, :CTX], test_w[:, CTX:]
    mse, models = {}, {}
    for variant in ("full", "dense_moe", "mse_only", "no_freq_embedding"):
        for seed in SEEDS:
            rc = RunConfig(model=ModelConfig(**TINY, horizon_len=H_REG))
            if variant != "full":
                rc = rc.with_ablations([variant])
            tcfg = TrainConfig(lr_peak=3e-3, total_steps=REG_STEPS, batch_size=32,
                               context_len=CTX, seed=seed)
            model = FinCastModel(rc.model, seed=seed)
            train(model, dataset, tcfg, rc.effective_loss())
            fc = forecast_batch(model, ctxs, H_REG, test_f)
            mse[variant, seed] = float(np.mean((fc.point - tgts) ** 2))
            models[variant, seed] = model
    return dict(mse=mse, models=models, ctxs=ctxs, freq=test_f, labels=test_lab)


def test_08_ablation_directionality(regime_runs):
    mse = regime_runs["mse"]
    wins, lines = {}, []
    for variant in ("dense_moe", "mse_only", "no_freq_embedding"):
        wins[variant] = sum(mse["full", s] <= mse[variant, s] for s in SEEDS)
        lines.append(f"{variant} {wins[variant]}/3")
    full = "/".join(f"{mse['full', s]:.3f}" for s in SEEDS)
    ok = all(w >= 2 for w in wins.values())
    record(8, "ablation directionality", ok, f"full MSE {full}; full <= ablated: " + ", ".join(lines))
    assert ok, {k: [mse[k, s] for s in SEEDS] for k in ("full",) + tuple(wins)}


def test_09_expert_specialization(regime_runs):
    # the seed-0 full model is the designated run; only regime-pure patches carry a label
    model = regime_runs["models"]["full", 0]
    ctxs, freq, labels = regime_runs["ctxs"], regime_runs["freq"], regime_runs["labels"]
    raw, _ = patchify_batch(labels.astype(float), model.config.patch_len)
    token_labels = np.where(raw.min(-1) == raw.max(-1), raw[..., 0], -1).astype(np.int64)
    dists = assignment_by_label(model, ctxs, freq, token_labels)
    tv = [max_pairwise_tv(dists[layer]) for layer in sorted(dists)]
    top = max(r["assignment_fraction"] for r in expert_activation(model, ctxs, freq))
    ok = max(tv) > 0.1 and top <= 0.6
    record(9, "expert specialization", ok,
           "max pairwise TV per layer " + "/".join(f"{v:.3f}" for v in tv)
           + f" (need > 0.1 in one); busiest expert {top:.3f} (<= 0.6)")
    assert top <= 0.6
    assert max(tv) > 0.1, tv


# ---------------------------------------------------------------------------
# 10. inference consistency

def test_10_inference_consistency():
    rng = np.random.default_rng(10)
    cfg = ModelConfig(**TINY, horizon_len=32)
    model = FinCastModel(cfg, seed=5)
    ctx = np.cumsum(rng.normal(0, 1, (3, 200)), axis=1) + 50
    cached = forecast_batch(model, ctx, 128, 3, use_cache=True)
    fresh = forecast_batch(model, ctx, 128, 3, use_cache=False)
    cache_err = float(np.max(np.abs(cached.point - fresh.point)))
    cache_err = max(cache_err, float(np.max(np.abs(cached.quantiles - fresh.quantiles))))

    multi = forecast_multichannel(model, ctx, 40, 3, workers=1)
    threaded = forecast_multichannel(model, ctx, 40, 3, workers=3)
    singles = [forecast(model, row, 40, 3) for row in ctx]
    exact = all(np.array_equal(multi.point[i], s.point[0])
                and np.array_equal(multi.quantiles[i], s.quantiles[0]) for i, s in enumerate(singles))
    exact = exact and np.array_equal(threaded.point, multi.point)

    f60 = forecast(model, ctx[0], 60, 3)
    shape_ok = f60.iterations == 2 and f60.point.shape == (1, 60) and f60.quantiles.shape == (1, 9, 60)
    ok = cache_err <= 1e-10 and exact and shape_ok
    record(10, "inference consistency", ok,
           f"cached vs fresh max |diff| {cache_err:.1e} (<= 1e-10); multichannel exact {exact}; "
           f"h=60 -> {f60.iterations} iterations, {f60.point.shape[1]} steps")
    assert cache_err <= 1e-10
    assert exact
    assert shape_ok


# ---------------------------------------------------------------------------
# 11. schedule

def test_11_schedule():
    cfg = TrainConfig(lr_peak=2e-4, total_steps=1000)
    expected = {50: 2e-4, 350: 2e-4, 675: 1.1e-4, 1000: 2e-5}
    errs = {s: abs(lr_at(s, cfg) - v) for s, v in expected.items()}
    jumps = [abs(lr_at(b + 1e-7, cfg) - lr_at(b - 1e-7, cfg)) for b in (50, 350)]
    ok = max(errs.values()) <= 1e-9 and max(jumps) <= 1e-9
    record(11, "learning-rate schedule", ok,
           f"max |lr - expected| {max(errs.values()):.1e}; jump at boundaries {max(jumps):.1e}")
    assert max(errs.values()) <= 1e-9
    assert max(jumps) <= 1e-9


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
