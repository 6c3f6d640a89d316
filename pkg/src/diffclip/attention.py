"""Standard and differential multi-head self-attention.

Both variants take activations shaped ``[..., N, d]`` (a leading batch axis is
optional) and share the same four ``d x d`` projections. The differential
variant splits every head's query/key into two halves, builds two softmax
maps at scale ``1/sqrt(d_h/2)`` and returns ``(A1 - lam * A2) V``, where

    lam = exp(<lq1, lk1>) - exp(<lq2, lk2>) + lambda_init
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

STANDARD = "standard"
DIFFERENTIAL = "differential"
DEFAULT_LAMBDA_INIT = 0.8
EXP_GUARD = 700.0


class AttentionConfigError(ValueError):
    pass


def lambda_init_schedule(layer: int) -> float:
    """Depth-dependent lambda_init; ``layer`` is 1-based."""
    if isinstance(layer, bool) or int(layer) != layer or layer < 1:
        raise AttentionConfigError(f"layer index must be an integer >= 1, got {layer!r}")
    return 0.8 - 0.6 * math.exp(-0.3 * layer)


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int
    variant: str = STANDARD
    lambda_init_mode: str = "constant"  # "constant" | "dynamic"
    lambda_init_value: float = DEFAULT_LAMBDA_INIT
    layer_index: int = 1
    # one lambda per head instead of one shared by all heads of the layer
    lambda_per_head: bool = False
    # RMS-normalise each head after the subtraction and rescale by (1 - lambda_init);
    # off by default to keep the plain (A1 - lam A2) V form
    head_norm: bool = False

    def __post_init__(self):
        d, h = self.model_dim, self.num_heads
        if d <= 0 or h <= 0 or d % h:
            raise AttentionConfigError(f"model_dim {d} must be a positive multiple of num_heads {h}")
        if self.variant not in (STANDARD, DIFFERENTIAL):
            raise AttentionConfigError(f"unknown attention variant {self.variant!r}")
        if self.variant == DIFFERENTIAL and (d // h) % 2:
            raise AttentionConfigError(f"differential attention needs an even head dim, got {d // h}")
        if self.lambda_init_mode not in ("constant", "dynamic"):
            raise AttentionConfigError(f"unknown lambda_init_mode {self.lambda_init_mode!r}")
        if self.layer_index < 1:
            raise AttentionConfigError(f"layer_index is 1-based, got {self.layer_index}")
        v = self.lambda_init_value
        if not math.isfinite(v):
            raise AttentionConfigError("lambda_init_value must be finite")
        if self.lambda_init_mode == "constant" and not 0.0 < v < 1.0:
            warnings.warn(f"lambda_init {v} outside (0, 1)", stacklevel=3)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def lambda_init(self) -> float:
        if self.lambda_init_mode == "dynamic":
            return lambda_init_schedule(self.layer_index)
        return float(self.lambda_init_value)

    @property
    def num_lambda_sets(self) -> int:
        if self.variant != DIFFERENTIAL:
            return 0
        return self.num_heads if self.lambda_per_head else 1


@dataclass
class LambdaParams:
    lq1: Tensor
    lk1: Tensor
    lq2: Tensor
    lk2: Tensor
    lambda_init: float

    def __post_init__(self):
        shapes = {self.lq1.shape, self.lk1.shape, self.lq2.shape, self.lk2.shape}
        if len(shapes) != 1 or self.lq1.ndim != 1:
            raise DimensionError(f"lambda vectors must share one 1-d shape, got {shapes}")
        if not math.isfinite(self.lambda_init):
            raise AttentionConfigError("lambda_init must be finite")

    def tensors(self) -> dict[str, Tensor]:
        return {"lq1": self.lq1, "lk1": self.lk1, "lq2": self.lq2, "lk2": self.lk2}


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    lambdas: list[LambdaParams] = field(default_factory=list)

    def named(self) -> dict[str, Tensor]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        if len(self.lambdas) == 1:
            for k, v in self.lambdas[0].tensors().items():
                out[k] = v
        else:
            for i, lp in enumerate(self.lambdas):
                for k, v in lp.tensors().items():
                    out[f"head{i}.{k}"] = v
        return out


def compute_lambda(p: LambdaParams) -> Tensor:
    a = T.sum_(T.mul(p.lq1, p.lk1))
    b = T.sum_(T.mul(p.lq2, p.lk2))
    worst = max(abs(float(a.data)), abs(float(b.data)))
    if worst > EXP_GUARD:
        raise OverflowError(f"lambda reparameterisation dot product {worst:.1f} exceeds {EXP_GUARD}")
    return T.add(T.sub(T.exp(a), T.exp(b)), p.lambda_init)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _check_input(x: Tensor, d: int) -> None:
    if x.ndim not in (2, 3) or x.shape[-1] != d:
        raise DimensionError(f"attention input {x.shape} does not end in model_dim {d}")


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def diff_attention_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, lam,
                        causal: bool = False) -> Tensor:
    """One differential head on ``x [N, d_in]``; ``wq/wk/wv`` are ``d_in x d_h``."""
    dh = wq.shape[1]
    if dh % 2:
        raise DimensionError(f"differential head needs an even width, got {dh}")
    if wk.shape != wq.shape or wv.shape[1] != dh:
        raise DimensionError("query/key/value widths differ")
    half = dh // 2
    q1, q2 = T.split(x @ wq, axis=-1, parts=2)
    k1, k2 = T.split(x @ wk, axis=-1, parts=2)
    v = x @ wv
    mask = causal_mask(x.shape[0]) if causal else None
    s = 1.0 / math.sqrt(half)
    a1 = T.softmax(T.scale(q1 @ T.transpose(k1), s), axis=-1, mask=mask)
    a2 = T.softmax(T.scale(q2 @ T.transpose(k2), s), axis=-1, mask=mask)
    return (a1 - a2 * lam) @ v


def standard_mha(x: Tensor, w: AttentionWeights, cfg: AttentionConfig, causal: bool = False,
                 probe: dict | None = None) -> Tensor:
    if cfg.variant != STANDARD:
        raise AttentionConfigError("standard_mha called with a differential config")
    _check_input(x, cfg.model_dim)
    xb, squeeze = _as_batched(x)
    b, n, d = xb.shape
    h, dh = cfg.num_heads, cfg.head_dim

    def heads(t):
        return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q, k, v = heads(xb @ w.wq), heads(xb @ w.wk), heads(xb @ w.wv)
    scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1, mask=causal_mask(n) if causal else None)
    if probe is not None:
        probe["attn"] = attn.data
    out = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (b, n, d)) @ w.wo
    return T.reshape(out, (n, d)) if squeeze else out


def layer_lambdas(w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    """Lambda values broadcastable against ``[B, h, 1, N, N]`` maps."""
    if len(w.lambdas) != cfg.num_lambda_sets:
        raise AttentionConfigError(
            f"expected {cfg.num_lambda_sets} lambda sets, weights carry {len(w.lambdas)}")
    lams = [compute_lambda(p) for p in w.lambdas]
    if len(lams) == 1:
        return lams[0]
    return T.reshape(T.stack(lams), (1, cfg.num_heads, 1, 1, 1))


def diff_mha(x: Tensor, w: AttentionWeights, cfg: AttentionConfig, causal: bool = False,
             probe: dict | None = None) -> Tensor:
    if cfg.variant != DIFFERENTIAL:
        raise AttentionConfigError("diff_mha called with a standard config")
    _check_input(x, cfg.model_dim)
    xb, squeeze = _as_batched(x)
    b, n, d = xb.shape
    h, dh = cfg.num_heads, cfg.head_dim
    half = dh // 2

    def halves(t):
        # [B, N, d] -> [B, h, 2, N, d_h/2]
        return T.transpose(T.reshape(t, (b, n, h, 2, half)), (0, 2, 3, 1, 4))

    q, k = halves(xb @ w.wq), halves(xb @ w.wk)
    v = T.transpose(T.reshape(xb @ w.wv, (b, n, h, dh)), (0, 2, 1, 3))
    scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(half))
    maps = T.softmax(scores, axis=-1, mask=causal_mask(n) if causal else None)
    a1 = T.slice_axis(maps, 2, 0, 1)
    a2 = T.slice_axis(maps, 2, 1, 2)
    lam = layer_lambdas(w, cfg)
    eff = T.reshape(a1 - a2 * lam, (b, h, n, n))
    if probe is not None:
        probe["attn"] = eff.data
        probe["a1"] = a1.data.reshape(b, h, n, n)
        probe["a2"] = a2.data.reshape(b, h, n, n)
        probe["lambda"] = np.broadcast_to(lam.data.reshape(-1), (h,)).copy()
    heads = eff @ v
    if cfg.head_norm:
        heads = T.scale(T.rms_norm(heads), 1.0 - cfg.lambda_init)
    out = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, n, d)) @ w.wo
    return T.reshape(out, (n, d)) if squeeze else out


def attention(x: Tensor, w: AttentionWeights, cfg: AttentionConfig, causal: bool = False,
              probe: dict | None = None) -> Tensor:
    if cfg.variant == DIFFERENTIAL:
        return diff_mha(x, w, cfg, causal=causal, probe=probe)
    return standard_mha(x, w, cfg, causal=causal, probe=probe)
