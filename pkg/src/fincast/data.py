"""CSV ingestion, cleaning, windowing, synthetic series and evaluation metrics."""
from __future__ import annotations

import csv
import glob
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .input_block import Series, freq_to_index
from .output_block import crossing_rate

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ingestion

def _parse_timestamp(raw):
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        f = float(raw)
        if math.isfinite(f):
            return int(round(f))
    except ValueError:
        pass
    from datetime import datetime, timezone
    dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def infer_freq_index(timestamps):
    """Nearest registry resolution for the median timestamp spacing (seconds)."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size < 2:
        return 3
    step = float(np.median(np.diff(ts)))
    table = [(1, 0), (60, 1), (3600, 2), (86400, 3), (7 * 86400, 4), (30.44 * 86400, 5)]
    return min(table, key=lambda t: abs(math.log(max(step, 1e-9)) - math.log(t[0])))[1]


def ingest_csv(path, freq=None):
    """One Series per value column of a ``timestamp,<name>...`` CSV.

    Rows whose timestamp or values cannot be parsed are skipped; their line
    numbers are kept in each Series' ``meta["unparsable_rows"]``. Empty cells
    and ``nan`` parse as NaN and are left for :func:`clean`.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise DataError(f"{path}: need a timestamp column and at least one value column")
    names = header[1:]
    ts, vals, bad = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            bad.append(lineno)
            continue
        try:
            t = _parse_timestamp(row[0])
            v = [float(c) if c.strip() else math.nan for c in row[1:]]
        except ValueError:
            bad.append(lineno)
            continue
        ts.append(t)
        vals.append(v)
    if not ts:
        raise DataError(f"{path}: no parsable rows")
    ts = np.asarray(ts, dtype=np.int64)
    lines = np.array([ln for ln in range(2, len(rows) + 1) if ln not in set(bad)])
    d = np.diff(ts)
    if np.any(d == 0):
        dup = np.flatnonzero(d == 0)
        raise DataError(f"{path}: duplicate timestamps at rows {lines[dup + 1].tolist()[:10]}")
    if np.any(d < 0):
        back = np.flatnonzero(d < 0)
        raise DataError(f"{path}: timestamps not increasing at rows {lines[back + 1].tolist()[:10]}")
    if bad:
        log.warning("%s: skipped %d unparsable rows", path, len(bad))
    fidx = infer_freq_index(ts) if freq is None else freq_to_index(freq)
    values = np.asarray(vals, dtype=np.float64)
    return [Series(values[:, j], ts.copy(), fidx, names[j],
                   {"source": str(path), "unparsable_rows": list(bad)})
            for j in range(len(names))]


# ---------------------------------------------------------------------------
# cleaning

@dataclass
class CleanReport:
    dropped: list = field(default_factory=list)     # original indices of non-finite values
    clipped: list = field(default_factory=list)     # indices (after dropping) that were clipped

    @property
    def empty(self):
        return not self.dropped and not self.clipped

    def gaps(self):
        """Runs of consecutive dropped indices as (start, length)."""
        out = []
        for i in self.dropped:
            if out and out[-1][0] + out[-1][1] == i:
                out[-1] = (out[-1][0], out[-1][1] + 1)
            else:
                out.append((i, 1))
        return out


def clean(series, window=256, threshold=12.0):
    """Drop non-finite points, then clip rolling z-score outliers.

    Returns a new Series and a CleanReport; never raises on bad data.
    """
    values = series.values
    finite = np.isfinite(values)
    report = CleanReport(dropped=np.flatnonzero(~finite).tolist())
    kept = values[finite]
    ts = series.timestamps[finite] if series.timestamps is not None else None
    if kept.size == 0:
        return None, report
    clipped, flags = _kernels.rolling_zscore_clip(kept, window, threshold)
    report.clipped = np.flatnonzero(flags).tolist()
    out = Series(clipped, ts, series.freq_index, series.name, dict(series.meta))
    return out, report


def clean_all(series_list, min_length, window=256, threshold=12.0):
    """Clean each series and drop those shorter than ``min_length`` afterwards."""
    kept, reports = [], []
    for s in series_list:
        c, rep = clean(s, window, threshold)
        reports.append(rep)
        if c is None or len(c) < min_length:
            log.info("excluding %s: %d points after cleaning", s.name, 0 if c is None else len(c))
            continue
        kept.append(c)
    return kept, reports


# ---------------------------------------------------------------------------
# windows and splits

def make_windows(values, context_len, horizon, stride=1):
    """Sliding (context, target) pairs; empty arrays when the series is too short."""
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    total = context_len + horizon
    if values.size < total:
        log.info("series of length %d too short for %d+%d windows", values.size, context_len, horizon)
        return np.zeros((0, context_len)), np.zeros((0, horizon))
    count = (values.size - total) // stride + 1
    starts = np.arange(count) * stride
    idx = starts[:, None] + np.arange(total)[None, :]
    w = values[idx]
    return w[:, :context_len], w[:, context_len:]


def split_series(values, ratios=(0.7, 0.1, 0.2)):
    """Time-ordered train/val/test split."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError("split ratios must be nonnegative and sum to 1")
    n = len(values)
    a = int(round(n * ratios[0]))
    b = int(round(n * (ratios[0] + ratios[1])))
    return values[:a], values[a:b], values[b:]


@dataclass
class DatasetManifest:
    entries: list                       # (path, freq_index or None, channel names or None)
    split: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise DataError("split ratios must sum to 1")
        for path, _, _ in self.entries:
            if not os.path.exists(path):
                raise DataError(f"manifest references missing file {path}")

    @classmethod
    def from_dir(cls, root, freq=None):
        """``manifest.json`` if present, else every CSV in ``root``."""
        mpath = os.path.join(root, "manifest.json")
        if os.path.exists(mpath):
            with open(mpath, encoding="utf-8") as fh:
                listing = json.load(fh)
            entries = [(os.path.join(root, e["path"]), e.get("freq", freq), e.get("channels"))
                       for e in listing.get("files", [])]
            return cls(entries, tuple(listing.get("split", (0.7, 0.1, 0.2))))
        files = sorted(glob.glob(os.path.join(root, "*.csv")))
        if not files:
            raise DataError(f"{root}: no CSV files")
        return cls([(f, freq, None) for f in files])

    def load(self):
        out = []
        for path, freq, channels in self.entries:
            series = ingest_csv(path, freq)
            if channels:
                series = [s for s in series if s.name in channels]
            for s in series:
                s.meta["dataset"] = os.path.splitext(os.path.basename(path))[0]
            out.extend(series)
        return out


# ---------------------------------------------------------------------------
# synthetic series

SYNTH_KINDS = ("sinusoid", "trend", "regime_ar", "random_walk", "ar1")


def synth_generate(kind, length=1024, seed=0, **params):
    """Deterministic synthetic series. ``regime_ar`` stores labels in meta["regimes"]."""
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    freq = params.pop("freq_index", 3)
    if kind == "sinusoid":
        periods = params.get("periods", (64.0,))
        amps = params.get("amplitudes", (1.0,) * len(periods))
        phases = params.get("phases")
        if phases is None:
            phases = rng.uniform(0, 2 * np.pi, len(periods))
        x = sum(a * np.sin(2 * np.pi * t / p + ph) for a, p, ph in zip(amps, periods, phases))
        x = x + params.get("noise", 0.0) * rng.standard_normal(length) + params.get("level", 0.0)
    elif kind == "trend":
        x = params.get("level", 0.0) + params.get("slope", 0.01) * t \
            + params.get("noise", 1.0) * rng.standard_normal(length)
    elif kind == "random_walk":
        x = params.get("start", 0.0) + np.cumsum(params.get("scale", 1.0) * rng.standard_normal(length))
    elif kind == "ar1":
        phi, sd = params.get("phi", 0.8), params.get("noise", 1.0)
        x = np.empty(length)
        prev = rng.standard_normal() * sd / math.sqrt(max(1 - phi * phi, 1e-12))
        eps = rng.standard_normal(length) * sd
        for i in range(length):
            prev = phi * prev + eps[i]
            x[i] = prev
        x = x + params.get("level", 0.0)
    elif kind == "regime_ar":
        phis = params.get("phis", (0.95, -0.5, 0.5))
        sds = params.get("noises", (0.5, 1.0, 2.0))
        means = params.get("means", (0.0,) * len(phis))
        stay = params.get("stay", 0.99)
        n_reg = len(phis)
        labels = np.empty(length, dtype=np.int64)
        x = np.empty(length)
        r, prev = int(rng.integers(n_reg)), 0.0
        u = rng.random(length)
        jump = rng.integers(0, n_reg - 1, length) if n_reg > 1 else np.zeros(length, dtype=int)
        eps = rng.standard_normal(length)
        for i in range(length):
            if i and u[i] > stay and n_reg > 1:
                r = (r + 1 + jump[i]) % n_reg
            prev = means[r] + phis[r] * (prev - means[r]) + sds[r] * eps[i]
            x[i] = prev
            labels[i] = r
        return Series(x, None, freq, "regime_ar", {"regimes": labels})
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {', '.join(SYNTH_KINDS)}")
    return Series(x, None, freq, kind, {})


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    rows: list   # one dict per (dataset, horizon)
    quantile_levels: tuple = ()

    def columns(self):
        cols = ["dataset", "horizon", "mse", "mae", "pinball"]
        cols += [f"coverage_q{int(round(q * 100)):02d}" for q in self.quantile_levels]
        cols += ["crossing_rate", "naive_mse", "naive_mae", "mean_mse", "mean_mae", "windows"]
        return cols

    def row(self, dataset, horizon):
        for r in self.rows:
            if r["dataset"] == dataset and r["horizon"] == horizon:
                return r
        raise KeyError((dataset, horizon))

    def to_csv(self, path_or_file):
        cols = self.columns()
        own = isinstance(path_or_file, (str, os.PathLike))
        fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
        try:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.8g}" for c in cols])
        finally:
            if own:
                fh.close()


def zscore_stats(contexts, eps=1e-8):
    mu = contexts.mean(axis=1, keepdims=True)
    sd = contexts.std(axis=1, keepdims=True)
    return mu, np.maximum(sd, eps)


def model_forecaster(model, freq_index=3, chunk=256):
    """Adapt a FinCastModel to the (contexts, horizon) -> (points, quantiles) protocol."""
    from .inference import forecast_batch

    def run(contexts, horizon):
        pts, qs = [], []
        for i in range(0, contexts.shape[0], chunk):
            f = forecast_batch(model, contexts[i:i + chunk], horizon, freq_index)
            pts.append(f.point)
            qs.append(f.quantiles)
        return np.concatenate(pts), np.concatenate(qs)

    run.quantile_levels = model.config.quantile_levels
    return run


def evaluate(forecaster, contexts, targets, horizons, quantiles=None, dataset="data",
             freq_index=3):
    """MSE/MAE on per-window z-scored values, pinball, coverage, crossing rate, baselines.

    ``forecaster`` is a FinCastModel or a callable ``(contexts, horizon) ->
    (points B×h, quantiles B×|Q|×h or None)``.
    """
    if hasattr(forecaster, "config") and hasattr(forecaster, "params"):
        forecaster = model_forecaster(forecaster, freq_index)
    if quantiles is None:
        quantiles = getattr(forecaster, "quantile_levels", ())
    quantiles = tuple(quantiles)
    contexts = np.asarray(contexts, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    horizons = sorted(set(int(h) for h in horizons))
    hmax = horizons[-1]
    if targets.shape[1] < hmax:
        raise ValueError(f"targets cover {targets.shape[1]} steps, horizon {hmax} requested")
    points, quant = forecaster(contexts, hmax)
    points = np.asarray(points, dtype=np.float64)
    mu, sd = zscore_stats(contexts)
    z_true = (targets[:, :hmax] - mu) / sd
    z_pred = (points[:, :hmax] - mu) / sd
    z_q = None
    if quant is not None and len(quantiles) and np.size(quant):
        z_q = (np.asarray(quant, dtype=np.float64)[:, :, :hmax] - mu[:, :, None]) / sd[:, :, None]
    z_last = (contexts[:, -1:] - mu) / sd
    rows = []
    for h in horizons:
        err = z_pred[:, :h] - z_true[:, :h]
        naive = z_last - z_true[:, :h]
        mean_err = -z_true[:, :h]      # context mean is 0 after z-scoring
        row = {
            "dataset": dataset, "horizon": h,
            "mse": float(np.mean(err ** 2)), "mae": float(np.mean(np.abs(err))),
            "naive_mse": float(np.mean(naive ** 2)), "naive_mae": float(np.mean(np.abs(naive))),
            "mean_mse": float(np.mean(mean_err ** 2)), "mean_mae": float(np.mean(np.abs(mean_err))),
            "windows": int(contexts.shape[0]),
        }
        pin = 0.0
        for j, q in enumerate(quantiles):
            key = f"coverage_q{int(round(q * 100)):02d}"
            if z_q is None:
                row[key] = float("nan")
                continue
            yq = z_q[:, j, :h]
            d = z_true[:, :h] - yq
            pin += float(np.mean(np.where(d >= 0, q * d, (q - 1.0) * d)))
            row[key] = float(np.mean(z_true[:, :h] <= yq))
        row["pinball"] = pin if z_q is not None else float("nan")
        row["crossing_rate"] = crossing_rate(z_q[:, :, :h], axis=1) if z_q is not None else float("nan")
        rows.append(row)
    return EvalReport(rows, quantiles)


def coverage(z_true, z_q):
    return float(np.mean(np.asarray(z_true) <= np.asarray(z_q)))
