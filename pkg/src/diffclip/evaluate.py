"""Zero-shot classification, retrieval Recall@K and linear / few-shot probes.

Evaluation works on any object exposing ``encode_images(images)`` and
``encode_texts(captions)`` that return unit-norm numpy rows, so hand-built
oracle models can be scored with the same code as trained ones.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import COLORS, POSITIONS, SHAPES, SIZES, TEMPLATE, Vocabulary, tokenize_batch
from .encoders import ModelWeights, encode_image, encode_text


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("DIFFATTN_THREADS", "1")))
    except ValueError:
        return 1


class ClipModel:
    """Frozen dual encoder plus the vocabulary used to tokenise prompts."""

    def __init__(self, weights: ModelWeights, vocab: Vocabulary, chunk: int = 256):
        self.weights = weights
        self.vocab = vocab
        self.chunk = chunk

    @classmethod
    def load(cls, checkpoint, vocab: Vocabulary) -> "ClipModel":
        return cls(ModelWeights.load(checkpoint), vocab)

    def _chunked(self, fn, items) -> np.ndarray:
        parts = [items[i:i + self.chunk] for i in range(0, len(items), self.chunk)]
        workers = min(eval_threads(), len(parts))
        if workers <= 1:
            return np.concatenate([fn(p) for p in parts])
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return np.concatenate(list(ex.map(fn, parts)))

    def encode_images(self, images) -> np.ndarray:
        return self._chunked(lambda b: encode_image(self.weights, b).data, np.asarray(images))

    def encode_tokens(self, tokens) -> np.ndarray:
        return self._chunked(lambda b: encode_text(self.weights, b).data, np.asarray(tokens))

    def encode_texts(self, captions: Sequence[str]) -> np.ndarray:
        toks = tokenize_batch(captions, self.vocab, self.weights.text_cfg.context_length)
        return self.encode_tokens(toks)


# -- zero-shot ------------------------------------------------------------------------

def class_prompts(classes: Sequence[tuple[str, str]]) -> list[list[str]]:
    """Caption-template prompts for each (shape, color) class, ensembled over
    every size and position."""
    return [[TEMPLATE.format(size=s, color=c, shape=shp, position=p)
             for s in SIZES for p in POSITIONS] for shp, c in classes]


def prompt_embeddings(model, prompts: Sequence) -> np.ndarray:
    """One unit vector per class; a list of prompts is averaged then renormalised."""
    if len(prompts) == 0:
        raise ValueError("empty prompt list")
    rows = []
    for entry in prompts:
        texts = [entry] if isinstance(entry, str) else list(entry)
        emb = model.encode_texts(texts).mean(axis=0)
        rows.append(emb / np.linalg.norm(emb))
    return np.stack(rows)


@dataclass
class ZeroShotResult:
    predictions: np.ndarray
    accuracy: float | None


def zero_shot_from_embeddings(image_emb: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    return np.argmax(image_emb @ class_emb.T, axis=1)


def zero_shot_classify(model, images, prompts: Sequence, labels=None) -> ZeroShotResult:
    if len(prompts) < 2:
        raise ValueError("zero-shot classification needs at least 2 classes")
    preds = zero_shot_from_embeddings(model.encode_images(images), prompt_embeddings(model, prompts))
    acc = None if labels is None else float(np.mean(preds == np.asarray(labels)))
    return ZeroShotResult(preds, acc)


# -- retrieval ------------------------------------------------------------------------

def match_ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; ties go to the lower index."""
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)]
    higher = (sim > diag[:, None]).sum(axis=1)
    lower_idx = np.tril(np.ones((n, n), dtype=bool), k=-1)
    ties = ((sim == diag[:, None]) & lower_idx).sum(axis=1)
    return higher + ties


def recall_from_embeddings(image_emb: np.ndarray, text_emb: np.ndarray,
                           ks: Sequence[int] = (1, 5)) -> dict[str, float]:
    n = len(image_emb)
    if len(text_emb) != n:
        raise ValueError("retrieval needs paired image/text sets of equal size")
    if max(ks) > n:
        raise ValueError(f"K={max(ks)} exceeds the {n}-pair evaluation set")
    sim = image_emb @ text_emb.T
    i2t = match_ranks(sim)
    t2i = match_ranks(sim.T)
    out = {}
    for k in ks:
        out[f"i2t_recall@{k}"] = float(np.mean(i2t < k))
        out[f"t2i_recall@{k}"] = float(np.mean(t2i < k))
    return out


def retrieval_recall(model, images, captions: Sequence[str],
                     ks: Sequence[int] = (1, 5)) -> dict[str, float]:
    return recall_from_embeddings(model.encode_images(images), model.encode_texts(captions), ks)


# -- probes ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeHyper:
    lr: float = 2.0
    iters: int = 500
    l2: float = 1e-4
    seed: int = 0


def select_shots(labels: np.ndarray, shots: int, seed: int = 0) -> np.ndarray:
    """Indices of ``shots`` examples per class, chosen by a seeded permutation."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if shots > len(idx):
            raise ValueError(f"class {c} has {len(idx)} examples, fewer than {shots} shots")
        picked.extend(sorted(rng.permutation(idx)[:shots].tolist()))
    return np.array(sorted(picked), dtype=np.int64)


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, num_classes: int,
                           hyper: ProbeHyper = ProbeHyper()) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on multinomial cross-entropy (+ L2 on weights)."""
    n, d = x.shape
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(hyper.iters):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= hyper.lr * (x.T @ g + hyper.l2 * w)
        b -= hyper.lr * g.sum(axis=0)
    return w, b


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                 shots: int | None = None, hyper: ProbeHyper = ProbeHyper()) -> float:
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    num_classes = int(max(train_y.max(), test_y.max())) + 1
    if train_y.min() < 0:
        raise ValueError("labels must be non-negative")
    absent = sorted(set(np.unique(test_y)) - set(np.unique(train_y)))
    if absent:
        raise ValueError(f"class(es) {absent} absent from the probe train split")
    if shots is not None:
        keep = select_shots(train_y, shots, hyper.seed)
        train_x, train_y = train_x[keep], train_y[keep]
    w, b = fit_softmax_regression(train_x, train_y, num_classes, hyper)
    return float(np.mean(np.argmax(test_x @ w + b, axis=1) == test_y))


def probe_split(labels: np.ndarray, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic half/half split of a labelled pool, stratified by class."""
    rng = np.random.default_rng([seed, 11])
    tr, te = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = (len(idx) + 1) // 2
        tr.extend(idx[:cut].tolist())
        te.extend(idx[cut:].tolist())
    return np.array(sorted(tr), dtype=np.int64), np.array(sorted(te), dtype=np.int64)


# -- reports ----------------------------------------------------------------------------

def write_report(path, metrics: Mapping[str, object]) -> None:
    """Flat ``key=value`` report, one metric per line."""
    lines = []
    for k, v in metrics.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={v}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out
