"""Miniature ViT image tower and causal text tower sharing one embedding space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import (DIFFERENTIAL, STANDARD, AttentionConfig, AttentionWeights,
                        LambdaParams, attention)
from .serialize import read_checkpoint, write_checkpoint
from .tensor import DimensionError, Tensor

PAD_ID = 0
EOT_ID = 1
INIT_STD = 0.02
LAMBDA_STD = 0.1
LOGIT_SCALE_INIT = math.log(1 / 0.07)
LOGIT_SCALE_MAX = math.log(100.0)  # keeps tau >= 0.01

VARIANTS = ("clip", "diffclip", "diffclip_star", "diffclip_dagger")


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    kind: str  # "vision" | "text"
    depth: int = 4
    model_dim: int = 128
    num_heads: int = 4
    mlp_ratio: float = 2.0
    attention_variant: str = STANDARD
    lambda_init_mode: str = "constant"
    lambda_init_value: float = 0.8
    lambda_per_head: bool = False
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    vocab_size: int = 32
    context_length: int = 16

    def __post_init__(self):
        if self.kind not in ("vision", "text"):
            raise ModelConfigError(f"encoder kind must be vision or text, got {self.kind!r}")
        if self.depth < 1:
            raise ModelConfigError("depth must be >= 1")
        if self.kind == "vision" and self.image_size % self.patch_size:
            raise ModelConfigError(
                f"image side {self.image_size} not divisible by patch {self.patch_size}")
        if self.kind == "text" and self.context_length < 2:
            raise ModelConfigError("context_length must leave room for EOT (>= 2)")
        if self.mlp_ratio <= 0:
            raise ModelConfigError("mlp_ratio must be positive")
        # surfaces head/variant errors eagerly
        self.attention_config(1)

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.model_dim))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1 if self.kind == "vision" else self.context_length

    def attention_config(self, layer: int) -> AttentionConfig:
        try:
            return AttentionConfig(
                model_dim=self.model_dim, num_heads=self.num_heads,
                variant=self.attention_variant, lambda_init_mode=self.lambda_init_mode,
                lambda_init_value=self.lambda_init_value, layer_index=layer,
                lambda_per_head=self.lambda_per_head)
        except ValueError as exc:
            raise ModelConfigError(str(exc)) from exc


def toy_configs(vocab_size: int = 32) -> tuple[EncoderConfig, EncoderConfig, int]:
    vision = EncoderConfig(kind="vision", depth=4, model_dim=128, num_heads=4,
                           image_size=32, patch_size=8)
    text = EncoderConfig(kind="text", depth=4, model_dim=128, num_heads=4,
                         vocab_size=vocab_size, context_length=16)
    return vision, text, 64


def b16_configs() -> tuple[EncoderConfig, EncoderConfig, int]:
    """CLIP-B/16 shapes. Only for parameter counting; never trained."""
    vision = EncoderConfig(kind="vision", depth=12, model_dim=768, num_heads=12, mlp_ratio=4.0,
                           image_size=224, patch_size=16)
    text = EncoderConfig(kind="text", depth=12, model_dim=512, num_heads=8, mlp_ratio=4.0,
                         vocab_size=49408, context_length=77)
    return vision, text, 512


def apply_variant(variant: str, vision: EncoderConfig, text: EncoderConfig,
                  lambda_init: float = 0.8) -> tuple[EncoderConfig, EncoderConfig]:
    """Attention settings for clip / diffclip / diffclip_star / diffclip_dagger."""
    v = variant.replace("-", "_").lower()
    if v not in VARIANTS:
        raise ModelConfigError(f"unknown model variant {variant!r}")
    diff = dict(attention_variant=DIFFERENTIAL, lambda_init_mode="constant",
                lambda_init_value=lambda_init)
    std = dict(attention_variant=STANDARD)
    if v == "clip":
        return replace(vision, **std), replace(text, **std)
    if v == "diffclip":
        return replace(vision, **diff), replace(text, **diff)
    if v == "diffclip_star":
        dyn = dict(diff, lambda_init_mode="dynamic")
        return replace(vision, **dyn), replace(text, **dyn)
    return replace(vision, **diff), replace(text, **std)


# -- parameters ---------------------------------------------------------------

def _param_shapes(cfg: EncoderConfig, prefix: str, embed_dim: int) -> Iterator[tuple[str, tuple, str]]:
    """(name, shape, init) for one tower, in creation order."""
    d = cfg.model_dim
    if cfg.kind == "vision":
        yield f"{prefix}.patch_proj", (cfg.channels * cfg.patch_size ** 2, d), "normal"
        yield f"{prefix}.cls", (d,), "normal"
        yield f"{prefix}.pos", (cfg.seq_len, d), "normal"
    else:
        yield f"{prefix}.tok_embed", (cfg.vocab_size, d), "normal"
        yield f"{prefix}.pos", (cfg.seq_len, d), "normal"
    for l in range(1, cfg.depth + 1):
        p = f"{prefix}.layer{l}"
        yield f"{p}.ln1.g", (d,), "ones"
        yield f"{p}.ln1.b", (d,), "zeros"
        for m in ("wq", "wk", "wv", "wo"):
            yield f"{p}.attn.{m}", (d, d), "normal"
        acfg = cfg.attention_config(l)
        half = acfg.head_dim // 2
        for i in range(acfg.num_lambda_sets):
            lp = f"{p}.attn.head{i}" if acfg.lambda_per_head else f"{p}.attn"
            yield f"{lp}.lq1", (half,), "lambda_q"
            yield f"{lp}.lk1", (half,), "lambda_k"
            yield f"{lp}.lq2", (half,), "lambda_q"
            yield f"{lp}.lk2", (half,), "lambda_k"
        yield f"{p}.ln2.g", (d,), "ones"
        yield f"{p}.ln2.b", (d,), "zeros"
        yield f"{p}.mlp.w1", (d, cfg.mlp_hidden), "normal"
        yield f"{p}.mlp.b1", (cfg.mlp_hidden,), "zeros"
        yield f"{p}.mlp.w2", (cfg.mlp_hidden, d), "normal"
        yield f"{p}.mlp.b2", (d,), "zeros"
    yield f"{prefix}.ln_post.g", (d,), "ones"
    yield f"{prefix}.ln_post.b", (d,), "zeros"
    yield f"{prefix}.proj", (d, embed_dim), "normal"


def parameter_shapes(image_cfg: EncoderConfig, text_cfg: EncoderConfig,
                     embed_dim: int) -> dict[str, tuple[int, ...]]:
    """Every named parameter shape, without allocating weights."""
    out = {}
    for name, shape, _ in _param_shapes(image_cfg, "visual", embed_dim):
        out[name] = shape
    for name, shape, _ in _param_shapes(text_cfg, "text", embed_dim):
        out[name] = shape
    out["logit_scale"] = ()
    return out


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # resample outside +-2 std
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


@dataclass
class ModelWeights:
    image_cfg: EncoderConfig
    text_cfg: EncoderConfig
    embed_dim: int
    seed: int
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def cfg(self, tower: str) -> EncoderConfig:
        return self.image_cfg if tower == "visual" else self.text_cfg

    def attention_weights(self, tower: str, layer: int) -> AttentionWeights:
        cfg = self.cfg(tower).attention_config(layer)
        p = f"{tower}.layer{layer}.attn"
        lambdas = []
        for i in range(cfg.num_lambda_sets):
            lp = f"{p}.head{i}" if cfg.lambda_per_head else p
            lambdas.append(LambdaParams(self.params[f"{lp}.lq1"], self.params[f"{lp}.lk1"],
                                        self.params[f"{lp}.lq2"], self.params[f"{lp}.lk2"],
                                        cfg.lambda_init))
        return AttentionWeights(self.params[f"{p}.wq"], self.params[f"{p}.wk"],
                                self.params[f"{p}.wv"], self.params[f"{p}.wo"], lambdas)

    def metadata(self) -> dict[str, object]:
        meta: dict[str, object] = {"embed_dim": self.embed_dim, "seed": self.seed}
        for prefix, cfg in (("vision", self.image_cfg), ("text", self.text_cfg)):
            for k, v in asdict(cfg).items():
                meta[f"{prefix}.{k}"] = v
        return meta

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = self.metadata()
        if extra_meta:
            meta.update(extra_meta)
        write_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path, requires_grad: bool = False) -> "ModelWeights":
        entries, meta = read_checkpoint(path)
        image_cfg = _cfg_from_meta(meta, "vision")
        text_cfg = _cfg_from_meta(meta, "text")
        embed_dim = int(meta["embed_dim"])
        expected = parameter_shapes(image_cfg, text_cfg, embed_dim)
        if set(expected) != set(entries):
            missing = sorted(set(expected) ^ set(entries))[:5]
            raise ModelConfigError(f"{path}: parameter names disagree with config: {missing}")
        params = {}
        for name, shape in expected.items():
            if entries[name].shape != shape:
                raise ModelConfigError(f"{path}: {name} has shape {entries[name].shape}, expected {shape}")
            params[name] = Tensor(entries[name], requires_grad=requires_grad)
        return cls(image_cfg, text_cfg, embed_dim, int(meta["seed"]), params)


def _cfg_from_meta(meta: dict[str, str], prefix: str) -> EncoderConfig:
    kwargs = {}
    for f in fields(EncoderConfig):
        raw = meta.get(f"{prefix}.{f.name}")
        if raw is None:
            continue
        if f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool", bool):
            kwargs[f.name] = raw == "True"
        else:
            kwargs[f.name] = raw
    return EncoderConfig(**kwargs)


def build_model(image_cfg: EncoderConfig, text_cfg: EncoderConfig, embed_dim: int,
                seed: int, requires_grad: bool = True) -> ModelWeights:
    """Deterministic initialisation from ``seed``.

    Matrices, embeddings and tokens: truncated normal (std 0.02). Biases zero,
    layer-norm gains one. Lambda vectors are drawn with ``lq1 == lq2`` and
    ``lk1 == lk2`` so the two exponentials cancel exactly and every head starts
    at lambda_init while still receiving non-zero gradients.
    """
    if image_cfg.kind != "vision" or text_cfg.kind != "text":
        raise ModelConfigError("expected (vision, text) encoder configs")
    if embed_dim < 1:
        raise ModelConfigError("embed_dim must be positive")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    paired: dict[str, np.ndarray] = {}
    for tower_cfg, prefix in ((image_cfg, "visual"), (text_cfg, "text")):
        for name, shape, init in _param_shapes(tower_cfg, prefix, embed_dim):
            if init == "normal":
                arr = _trunc_normal(rng, shape, INIT_STD)
            elif init == "ones":
                arr = np.ones(shape)
            elif init == "zeros":
                arr = np.zeros(shape)
            else:
                base = name.rsplit(".", 1)[0] + ":" + init
                if base not in paired:
                    paired[base] = _trunc_normal(rng, shape, LAMBDA_STD)
                arr = paired[base].copy()
            params[name] = Tensor(arr, requires_grad=requires_grad)
    params["logit_scale"] = Tensor(LOGIT_SCALE_INIT, requires_grad=requires_grad)
    return ModelWeights(image_cfg, text_cfg, embed_dim, seed, params)


# -- forward passes -------------------------------------------------------------

def patchify(image, patch: int) -> Tensor:
    """``[C, H, W]`` (or ``[B, C, H, W]``) -> ``[(B,) P, C*patch*patch]``, row-major patches."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"patchify expects [C,H,W] or [B,C,H,W], got {arr.shape}")
    b, c, hgt, wid = arr.shape
    if hgt % patch or wid % patch:
        raise DimensionError(f"image {hgt}x{wid} not divisible by patch {patch}")
    gh, gw = hgt // patch, wid // patch
    out = arr.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    out = out.reshape(b, gh * gw, c * patch * patch)
    return Tensor(out if batched else out[0])


def unpatchify(patches, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    batched = arr.ndim == 3
    if not batched:
        arr = arr[None]
    b = arr.shape[0]
    gh, gw = height // patch, width // patch
    out = arr.reshape(b, gh, gw, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    out = out.reshape(b, channels, height, width)
    return out if batched else out[0]


def _block(x: Tensor, w: ModelWeights, tower: str, layer: int, causal: bool,
           probe: list | None) -> Tensor:
    p = w.params
    pre = f"{tower}.layer{layer}"
    cfg = w.cfg(tower)
    rec = {} if probe is not None else None
    h = T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
    x = x + attention(h, w.attention_weights(tower, layer), cfg.attention_config(layer),
                      causal=causal, probe=rec)
    if probe is not None:
        probe.append(rec)
    h = T.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    h = T.gelu(h @ p[f"{pre}.mlp.w1"] + p[f"{pre}.mlp.b1"])
    return x + (h @ p[f"{pre}.mlp.w2"] + p[f"{pre}.mlp.b2"])


def _images_array(images) -> np.ndarray:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    return arr[None] if arr.ndim == 3 else arr


def vision_tokens(w: ModelWeights, images, probe: list | None = None) -> Tensor:
    """Final (post-norm) hidden states ``[B, 1 + P, d]`` of the image tower."""
    cfg = w.image_cfg
    arr = _images_array(images)
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if arr.ndim != 4 or arr.shape[1:] != want:
        raise DimensionError(f"images {arr.shape} do not match [B, {want}]")
    p = w.params
    b = arr.shape[0]
    x = patchify(arr, cfg.patch_size) @ p["visual.patch_proj"]
    cls = T.broadcast_to(T.reshape(p["visual.cls"], (1, 1, cfg.model_dim)), (b, 1, cfg.model_dim))
    x = T.concat([cls, x], axis=1) + p["visual.pos"]
    for l in range(1, cfg.depth + 1):
        x = _block(x, w, "visual", l, causal=False, probe=probe)
    return T.layer_norm(x, p["visual.ln_post.g"], p["visual.ln_post.b"])


def image_features(w: ModelWeights, images, probe: list | None = None) -> Tensor:
    """Projected class-token features before unit normalisation."""
    x = vision_tokens(w, images, probe)
    b, n, d = x.shape
    cls = T.gather_rows(T.reshape(x, (b * n, d)), np.arange(b) * n)
    return cls @ w.params["visual.proj"]


def encode_image(w: ModelWeights, images, probe: list | None = None) -> Tensor:
    return T.l2_normalize(image_features(w, images, probe), axis=-1)


def eot_positions(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"token batch must be [B, L], got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValueError(f"token id outside vocabulary of size {vocab_size}")
    is_eot = tokens == EOT_ID
    if not is_eot.any(axis=1).all():
        bad = int(np.flatnonzero(~is_eot.any(axis=1))[0])
        raise ValueError(f"token row {bad} has no EOT")
    return is_eot.argmax(axis=1)


def text_features(w: ModelWeights, tokens) -> Tensor:
    cfg = w.text_cfg
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] != cfg.context_length:
        raise DimensionError(f"token rows have length {tokens.shape[1]}, context is {cfg.context_length}")
    eot = eot_positions(tokens, cfg.vocab_size)
    p = w.params
    b, n = tokens.shape
    x = T.gather_rows(p["text.tok_embed"], tokens.astype(np.int64)) + p["text.pos"]
    for l in range(1, cfg.depth + 1):
        x = _block(x, w, "text", l, causal=True, probe=None)
    pooled = T.gather_rows(T.reshape(x, (b * n, cfg.model_dim)), np.arange(b) * n + eot)
    pooled = T.layer_norm(pooled, p["text.ln_post.g"], p["text.ln_post.b"])
    return pooled @ p["text.proj"]


def encode_text(w: ModelWeights, tokens) -> Tensor:
    return T.l2_normalize(text_features(w, tokens), axis=-1)
