"""Time the numba and numpy kernel paths on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Prints a table of median wall time per call and checks that both backends
produce the same result before timing them. A final row times one full
training step of the tiny model under each backend.
"""
import argparse
import statistics
import time

import numpy as np

from fincast import _kernels
from fincast.loss import LossWeights
from fincast.model import FinCastModel, ModelConfig
from fincast.trainer import TrainConfig, WindowDataset, train


def timed(fn, repeat):
    fn()                                   # warm-up (numba compiles here)
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases(quick):
    rng = np.random.default_rng(0)
    n = 20_000 if quick else 200_000
    series = rng.normal(size=n)
    series[rng.integers(0, n, n // 500)] += 50
    patches = rng.normal(size=(256, 16, 32))
    mask = (rng.random(patches.shape) < 0.15).astype(float)
    scores = rng.random((8192, 8))
    idx = rng.integers(0, 4096, 16384)
    vals = rng.normal(size=(16384, 32))
    return [
        ("rolling_zscore_clip", lambda: _kernels.rolling_zscore_clip(series, 256, 12.0)),
        ("patch_stats", lambda: _kernels.patch_stats(patches, mask)),
        ("topk_indices k=2", lambda: _kernels.topk_indices(scores, 2)),
        ("scatter_add_rows", lambda: _kernels.scatter_add_rows(4096, idx, vals)),
    ]


def train_step_case():
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=4, expert_hidden=64, patch_len=16,
                      horizon_len=16)
    rng = np.random.default_rng(1)
    ds = WindowDataset(np.cumsum(rng.normal(size=(256, 112)), axis=1), np.full(256, 3), 96)
    tcfg = TrainConfig(total_steps=20, batch_size=32, context_len=96)

    def run():
        train(FinCastModel(cfg, seed=0), ds, tcfg, LossWeights())
    return run, tcfg.total_steps


def same(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-10, atol=1e-10) for x, y in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    prev = _kernels.get_backend()
    print(f"{'kernel':24s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  parity")
    try:
        for name, fn in cases(args.quick):
            times, outs = {}, {}
            for backend in ("numba", "numpy"):
                _kernels.set_backend(backend)
                outs[backend] = fn()
                times[backend] = timed(fn, args.repeat)
            ok = same(outs["numba"], outs["numpy"])
            print(f"{name:24s} {times['numba'] * 1e3:10.3f} {times['numpy'] * 1e3:10.3f} "
                  f"{times['numpy'] / times['numba']:8.2f}  {'ok' if ok else 'MISMATCH'}")
        run, steps = train_step_case()
        times = {}
        for backend in ("numba", "numpy"):
            _kernels.set_backend(backend)
            times[backend] = timed(run, max(1, args.repeat // 2)) / steps
        print(f"{'train step (tiny)':24s} {times['numba'] * 1e3:10.3f} {times['numpy'] * 1e3:10.3f} "
              f"{times['numpy'] / times['numba']:8.2f}")
    finally:
        _kernels.set_backend(prev)


if __name__ == "__main__":
    main()
