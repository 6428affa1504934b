"""Model configuration, parameter initialization and the forward pass."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor_core as tc
from .decoder import attention_mask, decoder_stack
from .input_block import PatchBatch, embed_tokens
from .output_block import DECILES, ForecastOutput, check_quantiles, project_outputs


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 256
    patch_len: int = 32
    horizon_len: int = 32
    quantiles: tuple = DECILES
    freq_table_size: int = 8
    max_context: int = 512
    dense_moe: bool = False
    mse_only: bool = False
    no_freq_embedding: bool = False

    def __post_init__(self):
        object.__setattr__(self, "quantiles", check_quantiles(self.quantiles))
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"need 1 <= top_k <= n_experts, got {self.top_k}, {self.n_experts}")
        if self.patch_len < 1 or self.horizon_len < 1:
            raise ValueError("patch_len and horizon_len must be >= 1")
        if self.n_layers < 1:
            raise ValueError("need at least one decoder block")
        if self.freq_table_size < 1:
            raise ValueError("freq_table_size must be >= 1")
        if self.max_context < self.patch_len:
            raise ValueError("max_context must cover at least one patch")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def active_top_k(self):
        return self.n_experts if self.dense_moe else self.top_k

    @property
    def quantile_levels(self):
        return () if self.mse_only else self.quantiles

    @property
    def output_width(self):
        return self.horizon_len * (1 + len(self.quantile_levels))

    def canonical(self):
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            parts.append(f"{f.name}={v}")
        return "\n".join(parts)

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).digest()

    def with_(self, **kw):
        return replace(self, **kw)


def param_shapes(cfg: ModelConfig):
    d, p2 = cfg.d_model, 2 * cfg.patch_len
    shapes = {
        "input.w_hidden": (p2, d),
        "input.b_hidden": (d,),
        "input.w_out": (d, d),
        "input.b_out": (d,),
        "input.w_skip": (p2, d),
        "input.freq_table": (cfg.freq_table_size, d),
    }
    for layer in range(cfg.n_layers):
        a = f"blocks.{layer}.attn."
        shapes[a + "gamma"] = (d,)
        shapes[a + "w_qkv"] = (d, 3 * d)
        shapes[a + "alpha"] = (cfg.head_dim,)
        shapes[a + "w_o"] = (d, d)
        m = f"blocks.{layer}.moe."
        shapes[m + "gamma"] = (d,)
        shapes[m + "w_gate"] = (d, cfg.n_experts)
        for i in range(cfg.n_experts):
            e = f"{m}expert{i}."
            shapes[e + "w1"] = (d, cfg.expert_hidden)
            shapes[e + "b1"] = (cfg.expert_hidden,)
            shapes[e + "w2"] = (cfg.expert_hidden, d)
            shapes[e + "b2"] = (d,)
    w = cfg.output_width
    shapes.update({
        "output.w_hidden": (d, d),
        "output.b_hidden": (d,),
        "output.w_out": (d, w),
        "output.b_out": (w,),
        "output.w_skip": (d, w),
    })
    return shapes


def init_params(cfg: ModelConfig, seed=0):
    rng = np.random.default_rng(seed)
    residual_scale = 1.0 / np.sqrt(2.0 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf.startswith("b") or leaf == "alpha":
            arr = np.zeros(shape)
        elif leaf == "freq_table":
            arr = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model), shape)
        else:
            std = 1.0 / np.sqrt(shape[0])
            if leaf in ("w_o", "w2"):
                std *= residual_scale
            elif leaf == "w_gate":
                std *= 0.1
            elif name.startswith("output.") and leaf != "w_hidden":
                std *= 0.1
            arr = rng.normal(0.0, std, shape)
        params[name] = tc.Tensor(arr, requires_grad=True, name=name)
    return params


class FinCastModel:
    """A configuration plus its named parameter tensors."""

    def __init__(self, config: ModelConfig, params=None, seed=0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        expected = param_shapes(config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"{k}: shape {self.params[k].shape} != expected {shape}")

    @property
    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def astype(self, dtype):
        params = {k: tc.Tensor(v.data.astype(dtype), requires_grad=False, name=k)
                  for k, v in self.params.items()}
        return FinCastModel(self.config, params)

    def copy(self):
        params = {k: tc.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                  for k, v in self.params.items()}
        return FinCastModel(self.config, params)

    def forward(self, batch: PatchBatch, caches=None, mask=None):
        """Normalized-scale outputs for every token, plus per-layer routing stats."""
        cfg = self.config
        h = embed_tokens(batch, self.params, use_freq=not cfg.no_freq_embedding)
        token_valid = batch.token_valid()
        if mask is None and caches is None and not token_valid.all():
            n = h.shape[1]
            mask = attention_mask(n, n, key_valid=token_valid)
        h, stats = decoder_stack(h, self.params, cfg, mask=mask, token_valid=token_valid,
                                 caches=caches)
        out = project_outputs(h, self.params, cfg.horizon_len, len(cfg.quantile_levels))
        return out, stats
