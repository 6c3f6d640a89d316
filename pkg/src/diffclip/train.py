"""AdamW training loop with linear warmup and cosine decay."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Corpus
from .encoders import (LOGIT_SCALE_MAX, VARIANTS, EncoderConfig, ModelWeights, apply_variant,
                       build_model, encode_image, encode_text)
from .objective import clip_loss, similarity_from_logit_scale
from .tensor import DimensionError, Tape

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.5
    warmup_epochs: float = 1.0
    grad_clip: float = 1.0
    seed: int = 0
    variant: str = "diffclip"
    lambda_init: float = 0.8
    lambda_per_head: bool = False
    # model shapes
    vision_dim: int = 64
    vision_depth: int = 4
    vision_heads: int = 4
    text_dim: int = 64
    text_depth: int = 4
    text_heads: int = 4
    mlp_ratio: float = 2.0
    image_size: int = 32
    patch_size: int = 8
    context_length: int = 12
    embed_dim: int = 64
    # io
    dataset: str = "data"
    out_dir: str = "run"
    checkpoint: str = "model.ckpt"
    metrics: str = "metrics.tsv"

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_").lower()
        if self.variant not in VARIANTS:
            raise TrainConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.batch_size < 2:
            raise TrainConfigError("batch_size must be >= 2 for a contrastive loss")
        if not self.lr > 0:
            raise TrainConfigError("lr must be positive")
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise TrainConfigError("weight_decay and warmup_epochs must be non-negative")

    def encoder_configs(self, vocab_size: int) -> tuple[EncoderConfig, EncoderConfig]:
        vision = EncoderConfig(kind="vision", depth=self.vision_depth, model_dim=self.vision_dim,
                               num_heads=self.vision_heads, mlp_ratio=self.mlp_ratio,
                               image_size=self.image_size, patch_size=self.patch_size,
                               lambda_per_head=self.lambda_per_head)
        text = EncoderConfig(kind="text", depth=self.text_depth, model_dim=self.text_dim,
                             num_heads=self.text_heads, mlp_ratio=self.mlp_ratio,
                             vocab_size=vocab_size, context_length=self.context_length,
                             lambda_per_head=self.lambda_per_head)
        return apply_variant(self.variant, vision, text, self.lambda_init)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.out_dir) / self.checkpoint

    @property
    def metrics_path(self) -> Path:
        return Path(self.out_dir) / self.metrics

    @classmethod
    def field_types(cls) -> dict[str, type]:
        names = {"int": int, "float": float, "bool": bool, "str": str}
        return {f.name: names[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


# -- optimisation -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float,
               weight_decay: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               no_decay: frozenset | set = frozenset()) -> AdamState:
    """One decoupled-weight-decay Adam update, in place on ``params[name].data``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        data = p.data if hasattr(p, "data") else p
        if g.shape != data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and name not in no_decay:
            data *= 1.0 - lr * weight_decay
        data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr`` then cosine decay to 0 (``step`` 0-based)."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def no_decay_names(params: dict) -> set[str]:
    """Vectors and scalars (biases, norms, lambdas, class token, temperature) skip decay."""
    return {n for n, p in params.items() if p.data.ndim < 2}


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


# -- training loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ModelWeights
    step_losses: list[float]
    epoch_losses: list[float]
    checkpoint: Path
    metrics: Path
    seconds: float

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def batch_loss(model: ModelWeights, images, tokens):
    with Tape() as tape:
        u = encode_image(model, images)
        v = encode_text(model, tokens)
        loss = clip_loss(similarity_from_logit_scale(u, v, model["logit_scale"]))
    return tape, loss


def _fmt(x: float) -> str:
    return repr(float(x))


def train(cfg: TrainConfig, corpus: Corpus | None = None, progress=None) -> TrainResult:
    """Train one model. Deterministic in (cfg, corpus)."""
    t0 = time.perf_counter()
    corpus = corpus if corpus is not None else Corpus(cfg.dataset)
    vision, text = cfg.encoder_configs(len(corpus.vocab))
    model = build_model(vision, text, cfg.embed_dim, cfg.seed)
    params = model.params
    skip_decay = no_decay_names(params)

    train_idx = corpus.indices("train")
    steps_per_epoch = len(train_idx) // cfg.batch_size
    if steps_per_epoch < 1:
        raise TrainConfigError(
            f"train split has {len(train_idx)} samples, fewer than batch_size {cfg.batch_size}")
    total = steps_per_epoch * cfg.epochs
    warmup = int(round(cfg.warmup_epochs * steps_per_epoch))
    images = corpus.images
    tokens = np.stack([corpus.batch([i], cfg.context_length).tokens[0] for i in range(len(corpus))])

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = AdamState()
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    lines: list[str] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = train_idx[np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(train_idx))]
        running = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            model.zero_grad()
            tape, loss = batch_loss(model, images[idx], tokens[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at step {step} (epoch {epoch})")
            tape.backward(loss)
            grads = {n: p.grad for n, p in params.items()}
            clip_gradients(grads, cfg.grad_clip)
            lr = lr_at(step, total, warmup, cfg.lr)
            tau = math.exp(-float(params["logit_scale"].data))
            adamw_step(params, grads, state, lr, cfg.weight_decay, no_decay=skip_decay)
            ls = params["logit_scale"].data
            np.minimum(ls, LOGIT_SCALE_MAX, out=ls)
            for name, p in params.items():
                if not np.all(np.isfinite(p.data)):
                    raise NumericalError(f"parameter {name} became non-finite at step {step}")
            lines.append(f"{step}\t{epoch}\t{_fmt(value)}\t{_fmt(lr)}\t{_fmt(tau)}\n")
            step_losses.append(value)
            running.append(value)
            step += 1
        epoch_losses.append(float(np.mean(running)))
        log.info("epoch %d loss %.4f", epoch, epoch_losses[-1])
        if progress is not None:
            progress(epoch, epoch_losses[-1])

    with open(cfg.metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    meta = {"variant": cfg.variant}
    meta.update({f"train.{k}": v for k, v in asdict(cfg).items()
                 if k not in ("dataset", "out_dir", "checkpoint", "metrics")})
    model.save(cfg.checkpoint_path, extra_meta=meta)
    return TrainResult(model, step_losses, epoch_losses, cfg.checkpoint_path, cfg.metrics_path,
                       time.perf_counter() - t0)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
