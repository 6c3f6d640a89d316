"""Symmetric contrastive (CLIP) objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

UNIT_TOL = 1e-6


@dataclass
class SimilarityMatrix:
    values: Tensor
    tau: float

    def __post_init__(self):
        s = self.values.shape
        if len(s) != 2 or s[0] != s[1]:
            raise DimensionError(f"similarity matrix must be square, got {s}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


def _check_unit_rows(x: Tensor, name: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} rows are not unit-norm (max deviation "
                         f"{np.max(np.abs(norms - 1.0)):.2e})")


def similarity_matrix(u: Tensor, v: Tensor, tau) -> SimilarityMatrix:
    """``S = u v^T / tau``. ``tau`` may be a float or a scalar Tensor of 1/tau
    given through :func:`similarity_from_logit_scale`."""
    if u.ndim != 2 or u.shape != v.shape:
        raise DimensionError(f"embeddings {u.shape} and {v.shape} must both be [N, e]")
    _check_unit_rows(u, "image")
    _check_unit_rows(v, "text")
    tau = float(tau)
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return SimilarityMatrix(T.scale(u @ T.transpose(v), 1.0 / tau), tau)


def similarity_from_logit_scale(u: Tensor, v: Tensor, logit_scale: Tensor) -> SimilarityMatrix:
    """Similarity with a learnable ``logit_scale = ln(1/tau)``."""
    if u.ndim != 2 or u.shape != v.shape:
        raise DimensionError(f"embeddings {u.shape} and {v.shape} must both be [N, e]")
    _check_unit_rows(u, "image")
    _check_unit_rows(v, "text")
    inv_tau = T.exp(logit_scale)
    return SimilarityMatrix((u @ T.transpose(v)) * inv_tau, 1.0 / float(inv_tau.data))


def clip_loss(s) -> Tensor:
    """Mean of the row-wise and column-wise cross-entropies with diagonal targets."""
    values = s.values if isinstance(s, SimilarityMatrix) else s
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise DimensionError(f"clip_loss needs a square matrix, got {values.shape}")
    targets = np.arange(values.shape[0])
    rows = T.cross_entropy_rows(values, targets)
    cols = T.cross_entropy_rows(T.transpose(values), targets)
    return T.scale(rows + cols, 0.5)


def uniform_loss(n: int) -> float:
    return math.log(n)
