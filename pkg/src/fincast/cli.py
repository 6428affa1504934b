"""fincast command line: train, forecast, eval, gradcheck, experts, synth."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .config import ABLATIONS, ConfigError, RunConfig, load_run_config
from .data import (DataError, DatasetManifest, clean_all, evaluate, ingest_csv, make_windows,
                   split_series, synth_generate, SYNTH_KINDS)
from .input_block import freq_to_index
from .weights import WeightFileError, load_weights

log = logging.getLogger("fincast")


class UsageError(Exception):
    pass


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _ablations(text):
    names = [a.strip() for a in text.split(",") if a.strip()]
    for n in names:
        if n not in ABLATIONS:
            raise argparse.ArgumentTypeError(f"unknown ablation {n!r}; choose from {', '.join(ABLATIONS)}")
    return names


def build_parser():
    p = argparse.ArgumentParser(prog="fincast", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a directory of CSV series")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--data", required=True, help="directory of CSVs (optional manifest.json)")
    t.add_argument("--out", required=True, help="checkpoint weight file to write")
    t.add_argument("--ablate", type=_ablations, default=[], help=",".join(ABLATIONS))
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--freq", help="frequency when CSV timestamps should not be used")
    t.add_argument("--stride", type=int, default=1)
    t.add_argument("--log", help="loss log CSV (default <out>.loss.csv)")

    f = sub.add_parser("forecast", help="forecast every value column of a CSV")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--input", required=True)
    f.add_argument("--horizon", type=int, required=True)
    f.add_argument("--freq", default=None)
    f.add_argument("--quantiles", action="store_true", help="include quantile columns")
    f.add_argument("--out", help="output CSV (default stdout)")
    f.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    f.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="sliding-window evaluation report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizons", type=_ints, default=[10, 30, 60])
    e.add_argument("--context", type=int, default=128)
    e.add_argument("--stride", type=int, default=1)
    e.add_argument("--freq", default=None)
    e.add_argument("--out", help="report CSV (default stdout)")
    e.add_argument("--seed", type=int)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    g.add_argument("--config")
    g.add_argument("--coords", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--h", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-4)

    x = sub.add_parser("experts", help="expert-activation statistics as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True, help="CSV file or directory")
    x.add_argument("--context", type=int, default=128)
    x.add_argument("--stride", type=int, default=32)
    x.add_argument("--freq", default=None)
    x.add_argument("--out")
    x.add_argument("--seed", type=int)

    s = sub.add_parser("synth", help="write a synthetic series CSV")
    s.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    s.add_argument("--length", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--freq", default="daily")
    s.add_argument("--out", required=True)
    s.add_argument("--labels-out", help="regime labels CSV (regime_ar only)")
    return p


def _open_out(path):
    if path:
        return open(path, "w", newline="", encoding="utf-8")
    return _nullctx(sys.stdout)


def _load_series(path, freq):
    if os.path.isdir(path):
        return DatasetManifest.from_dir(path, freq).load()
    return ingest_csv(path, freq)


def cmd_train(args):
    from .trainer import WindowDataset, train

    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.ablate:
        cfg = cfg.with_ablations(args.ablate)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    sys.stderr.write(cfg.dump())
    m, tcfg = cfg.model, cfg.train
    manifest = DatasetManifest.from_dir(args.data, args.freq)
    series, _ = clean_all(manifest.load(), tcfg.context_len + m.horizon_len)
    windows, freqs = [], []
    for s in series:
        part, _, _ = split_series(s.values, manifest.split)
        ctx, tgt = make_windows(part, tcfg.context_len, m.horizon_len, args.stride)
        if ctx.shape[0]:
            windows.append(np.concatenate([ctx, tgt], axis=1))
            freqs.append(np.full(ctx.shape[0], s.freq_index))
    if not windows:
        raise DataError("no training windows: every series is shorter than context + horizon")
    dataset = WindowDataset(np.concatenate(windows), np.concatenate(freqs), tcfg.context_len)
    from .model import FinCastModel
    model = FinCastModel(m, seed=tcfg.seed)
    log.info("training %d parameters on %d windows", model.n_parameters, len(dataset))
    every = max(1, tcfg.total_steps // 20)
    result = train(model, dataset, tcfg, cfg.effective_loss(), out_path=args.out, run_config=cfg,
                   log_path=args.log,
                   callback=lambda r: r["step"] % every == 0 and log.info(
                       "step %d total %.5f lr %.2e", r["step"], r["total"], r["lr"]))
    last = result.log[-1]
    print(f"trained {tcfg.total_steps} steps; final total loss {last['total']:.6f}; "
          f"weights -> {args.out}")
    return 0


def cmd_forecast(args):
    from .inference import forecast_multichannel

    dtype = np.float32 if args.dtype == "float32" else np.float64
    model = load_weights(args.ckpt, dtype=dtype)
    series = ingest_csv(args.input, args.freq)
    fidx = series[0].freq_index
    if fidx >= model.config.freq_table_size:
        raise UsageError(f"frequency index {fidx} exceeds the model's table")
    lengths = {len(s) for s in series}
    if len(lengths) > 1:
        raise DataError("value columns differ in usable length")
    matrix = np.stack([s.values for s in series])
    if not np.all(np.isfinite(matrix)):
        raise DataError("input holds non-finite values; run it through cleaning first")
    fc = forecast_multichannel(model, matrix, args.horizon, fidx)
    qcols = [f"q{int(round(q * 100)):02d}" for q in fc.quantile_levels] if args.quantiles else []
    multi = len(series) > 1
    with _open_out(args.out) as fh:
        w = csv.writer(fh)
        w.writerow((["channel"] if multi else []) + ["step", "point"] + qcols)
        for c, s in enumerate(series):
            for t in range(args.horizon):
                row = ([s.name] if multi else []) + [t + 1, f"{fc.point[c, t]:.8g}"]
                if args.quantiles:
                    row += [f"{fc.quantiles[c, j, t]:.8g}" for j in range(len(qcols))]
                w.writerow(row)
    return 0


class _nullctx:
    def __init__(self, obj):
        self.obj = obj

    def __enter__(self):
        return self.obj

    def __exit__(self, *exc):
        return False


def cmd_eval(args):
    model = load_weights(args.ckpt)
    manifest = DatasetManifest.from_dir(args.data, args.freq) if os.path.isdir(args.data) else None
    series = manifest.load() if manifest else ingest_csv(args.data, args.freq)
    split = manifest.split if manifest else (0.7, 0.1, 0.2)
    hmax = max(args.horizons)
    series, _ = clean_all(series, args.context + hmax)
    groups = {}
    for s in series:
        _, _, test = split_series(s.values, split)
        ctx, tgt = make_windows(test, args.context, hmax, args.stride)
        if ctx.shape[0] == 0:
            continue
        key = (s.meta.get("dataset", s.name), s.freq_index)
        groups.setdefault(key, []).append((ctx, tgt))
    if not groups:
        raise DataError("no evaluation windows (test split too short)")
    rows, q = [], model.config.quantile_levels
    for (name, fidx), parts in sorted(groups.items()):
        ctx = np.concatenate([p[0] for p in parts])
        tgt = np.concatenate([p[1] for p in parts])
        report = evaluate(model, ctx, tgt, args.horizons, dataset=name, freq_index=fidx)
        rows.extend(report.rows)
    from .data import EvalReport
    report = EvalReport(rows, q)
    with _open_out(args.out) as fh:
        report.to_csv(fh)
    return 0


def cmd_gradcheck(args):
    from .diagnostics import gradcheck_model
    from .model import ModelConfig

    if args.config:
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig(model=ModelConfig(d_model=32, n_layers=2, n_heads=4, expert_hidden=64,
                                          patch_len=16, horizon_len=16))
    report = gradcheck_model(cfg, n_coords=args.coords, seed=args.seed, h=args.h, tol=args.tol)
    print(f"max_rel_err {report.max_rel_err:.3e}")
    print(report.summary())
    return 0 if report.passed else 1


def cmd_experts(args):
    from .diagnostics import expert_activation, write_expert_csv

    model = load_weights(args.ckpt)
    series = _load_series(args.data, args.freq)
    ctxs, freqs = [], []
    for s in series:
        vals = s.values[np.isfinite(s.values)]
        ctx, _ = make_windows(vals, args.context, 0, args.stride)
        if ctx.shape[0]:
            ctxs.append(ctx)
            freqs.append(np.full(ctx.shape[0], s.freq_index))
    if not ctxs:
        raise DataError("no windows of the requested context length")
    rows = expert_activation(model, np.concatenate(ctxs), np.concatenate(freqs))
    with _open_out(args.out) as fh:
        write_expert_csv(rows, fh)
    return 0


def cmd_synth(args):
    fidx = freq_to_index(args.freq)
    s = synth_generate(args.kind, args.length, args.seed, freq_index=fidx)
    step = {0: 1, 1: 60, 2: 3600, 3: 86400, 4: 604800, 5: 2629746}.get(fidx, 86400)
    ts = 1_600_000_000 + step * np.arange(len(s))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", s.name])
        for t, v in zip(ts, s.values):
            w.writerow([int(t), repr(float(v))])
    if args.labels_out:
        if "regimes" not in s.meta:
            raise UsageError("--labels-out only applies to --kind regime_ar")
        with open(args.labels_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "regime"])
            for t, r in zip(ts, s.meta["regimes"]):
                w.writerow([int(t), int(r)])
    return 0


COMMANDS = {"train": cmd_train, "forecast": cmd_forecast, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "experts": cmd_experts, "synth": cmd_synth}


def run_command(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fincast: error: {exc}", file=sys.stderr)
        return 2
    except WeightFileError as exc:
        print(f"fincast: weight file error ({exc.code}): {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, OSError, RuntimeError) as exc:
        print(f"fincast: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
