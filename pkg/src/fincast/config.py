"""Flat ``key = value`` run configuration with strict validation."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .loss import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

ABLATIONS = ("dense_moe", "mse_only", "no_freq_embedding")


class ConfigError(ValueError):
    pass


def _coerce(kind, key, raw):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def _field_kinds(cls):
    kinds = {}
    for f in fields(cls):
        default = f.default
        kinds[f.name] = type(default) if default is not None else str
    return kinds


_MODEL_KINDS = _field_kinds(ModelConfig)
_TRAIN_KINDS = _field_kinds(TrainConfig)
_LOSS_KEYS = {"lambda_quantile": "lambda_quantile", "lambda_trend": "lambda_trend",
              "lambda_moe": "lambda_moe", "huber_delta": "delta"}


def parse_pairs(text):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def parse_model_config(text):
    pairs = parse_pairs(text)
    kw = {}
    for key, raw in pairs.items():
        if key not in _MODEL_KINDS:
            raise ConfigError(f"unknown model key {key!r}")
        kw[key] = _coerce(_MODEL_KINDS[key], key, raw)
    try:
        return ModelConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    @property
    def seed(self):
        return self.train.seed

    def effective_loss(self):
        """Loss weights after ablations; MSE-only drops every auxiliary term."""
        if self.model.mse_only:
            return LossWeights(0.0, 0.0, 0.0, self.loss.delta, mse_point=True)
        return self.loss

    def with_ablations(self, names):
        kw = {}
        for name in names:
            if name not in ABLATIONS:
                raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
            kw[name] = True
        return replace(self, model=replace(self.model, **kw))

    def with_overrides(self, **kw):
        """Override train/model keys by name (e.g. seed, total_steps, d_model)."""
        mk = {k: v for k, v in kw.items() if k in _MODEL_KINDS}
        tk = {k: v for k, v in kw.items() if k in _TRAIN_KINDS}
        lk = {_LOSS_KEYS[k]: v for k, v in kw.items() if k in _LOSS_KEYS}
        unknown = set(kw) - set(mk) - set(tk) - set(lk)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        return RunConfig(replace(self.model, **mk), replace(self.train, **tk),
                         replace(self.loss, **lk))

    def dump(self):
        lines = ["# model"]
        lines += self.model.canonical().splitlines()
        lines.append("# train")
        for f in fields(self.train):
            v = getattr(self.train, f.name)
            lines.append(f"{f.name}={v}")
        lines.append("# loss")
        for key, attr in _LOSS_KEYS.items():
            lines.append(f"{key}={getattr(self.loss, attr)}")
        return "\n".join(lines) + "\n"


def parse_run_config(text):
    pairs = parse_pairs(text)
    mk, tk, lk = {}, {}, {}
    ablations = []
    for key, raw in pairs.items():
        if key == "ablate":
            ablations += [a.strip() for a in raw.split(",") if a.strip()]
        elif key in _MODEL_KINDS:
            mk[key] = _coerce(_MODEL_KINDS[key], key, raw)
        elif key in _TRAIN_KINDS:
            tk[key] = _coerce(_TRAIN_KINDS[key], key, raw)
        elif key in _LOSS_KEYS:
            lk[_LOSS_KEYS[key]] = _coerce(float, key, raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        cfg = RunConfig(ModelConfig(**mk), TrainConfig(**tk), LossWeights(**lk))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg.with_ablations(ablations) if ablations else cfg


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read())
