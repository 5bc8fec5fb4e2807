"""Per-point class distributions from centroids, prototypes or transport plans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .ot_core import TransportPlan, build_cost_matrix


@dataclass(frozen=True)
class ConditionalConfig:
    """How centroid distances become class distributions.

    ``mode="softmax"`` uses the temperature ``T``; ``mode="sinkhorn"``
    row-normalizes an entropic transport plan with regularization ``gamma``.
    """

    mode: str = "softmax"
    T: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.mode not in ("softmax", "sinkhorn"):
            raise ValueError(f"unknown conditional mode {self.mode!r}")
        if not self.T > 0:
            raise ValueError(f"temperature must be > 0, got {self.T}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


def _check_rows(probs):
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise NumericError("class distribution rows are not on the probability simplex")
    return probs


def softmax_conditionals(points, centroids, T: float = 1.0) -> np.ndarray:
    """``p(j | x_i)`` proportional to ``exp(-||x_i - c_j||^2 / T)``.

    Returns an n x k row-stochastic matrix.
    """
    if not T > 0:
        raise ValueError(f"temperature must be > 0, got {T}")
    logits = -build_cost_matrix(points, centroids) / T
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return _check_rows(e / e.sum(axis=1, keepdims=True))


def sinkhorn_conditionals(plan) -> np.ndarray:
    """Row-normalize a transport plan into per-point class distributions."""
    p = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"plan must be 2-D, got shape {p.shape}")
    sums = p.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise NumericError("transport plan has a row with zero mass")
    return _check_rows(p / sums)


def prototypes(points, labels, k: int) -> np.ndarray:
    """Per-class mean of ``points``; every class in ``0..k-1`` must occur."""
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError(f"points {x.shape} and labels {y.shape} are inconsistent")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    counts = np.bincount(y, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no labeled points")
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, y, x)
    return sums / counts[:, None]


def hard_assign(dist) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return np.argmax(np.asarray(dist), axis=1)
