"""Centroid finding: Sinkhorn K-Means and the Lloyd / K-Means++ baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, ShapeError
from .ot_core import (
    DEFAULT_MAX_ITERS,
    Marginals,
    TransportPlan,
    build_cost_matrix,
    sinkhorn,
    transport_objective,
)

log = logging.getLogger(__name__)

EMPTY_CLUSTER_MASS = 1e-12
# Inner solves must be far tighter than the stand-alone default for the
# objective trace to descend within 1e-9: marginal error is amplified by the
# dual potentials, which scale like cost / gamma.
INNER_SINKHORN_TOL = 1e-12


@dataclass(frozen=True)
class InitStrategy:
    """How to place the initial centroids.

    ``kind`` is ``"zero_noise"`` (i.i.d. N(0, sigma^2) entries),
    ``"kmeans_pp"`` (D^2 sampling over data points) or ``"provided"``.
    """

    kind: str = "zero_noise"
    sigma: float = 1e-3
    centroids: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zero_noise", "kmeans_pp", "provided"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind == "zero_noise" and not self.sigma > 0:
            raise ValueError("zero_noise init requires sigma > 0")
        if self.kind == "provided" and self.centroids is None:
            raise ValueError("provided init requires centroids")

    @classmethod
    def zero_noise(cls, sigma: float = 1e-3, seed: int = 0) -> "InitStrategy":
        return cls("zero_noise", sigma=sigma, seed=seed)

    @classmethod
    def kmeans_pp(cls, seed: int = 0) -> "InitStrategy":
        return cls("kmeans_pp", seed=seed)

    @classmethod
    def provided(cls, centroids) -> "InitStrategy":
        return cls("provided", centroids=np.array(centroids, dtype=np.float64))

    def with_seed(self, seed: int) -> "InitStrategy":
        return replace(self, seed=seed)


def init_centroids(points, k: int, strategy: InitStrategy) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"points must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")

    if strategy.kind == "provided":
        c = np.array(strategy.centroids, dtype=np.float64)
        if c.shape != (k, d):
            raise ShapeError(f"provided centroids have shape {c.shape}, expected {(k, d)}")
        return c

    rng = np.random.default_rng(strategy.seed)
    if strategy.kind == "zero_noise":
        return rng.normal(0.0, strategy.sigma, size=(k, d))

    if k > n:
        raise ValueError(f"kmeans++ needs k <= n (k={k}, n={n})")
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        weights = d2.copy()
        weights[chosen] = 0.0
        total = weights.sum()
        if total > 0:
            idx = int(rng.choice(n, p=weights / total))
        else:
            # all remaining points coincide with chosen ones
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return x[chosen].copy()


@dataclass
class ClusteringResult:
    """Output of a clustering run.

    ``assignments`` is the n x k soft assignment matrix (the transport plan
    for Sinkhorn K-Means, a 0 / (1/n) indicator for Lloyd). ``label_mode``
    records whether ``hard_labels`` come from the nearest centroid or from
    the plan's row argmax.
    """

    centroids: np.ndarray
    assignments: np.ndarray
    hard_labels: np.ndarray
    objective_trace: list[float]
    outer_iterations: int
    converged: bool
    label_mode: str = "nearest"
    transport: TransportPlan | None = field(default=None, repr=False)
    warnings: list[str] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else float("nan")


def nearest_centroid(points, centroids) -> np.ndarray:
    """Index of the closest centroid per point; ties go to the lowest index."""
    return np.argmin(build_cost_matrix(points, centroids), axis=1)


def _weighted_means(x, weights):
    # anchored at x[0] so that coincident points give bit-exact centroids
    anchor = x[0]
    mass = weights.sum(axis=0)
    return anchor + (weights.T @ (x - anchor)) / mass[:, None], mass


def _farthest_point(x, centroids, exclude=()):
    d2 = build_cost_matrix(x, centroids).min(axis=1)
    d2[list(exclude)] = -1.0
    return int(np.argmax(d2))


def _check_points(points, k):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"points must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("points contain NaN or Inf")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n (k={k}, n={n})")
    return x


def sinkhorn_kmeans(
    points,
    k: int,
    col_weights=None,
    gamma: float = 1.0,
    init: InitStrategy | None = None,
    *,
    outer_tol: float = 1e-6,
    max_outer: int = 100,
    sinkhorn_tol: float = INNER_SINKHORN_TOL,
    sinkhorn_max_iters: int = DEFAULT_MAX_ITERS,
    log_domain: bool = True,
    label_mode: str = "nearest",
) -> ClusteringResult:
    """Balanced (or known-weight) K-Means with entropic OT assignments.

    Alternates a Sinkhorn solve between the points (uniform weights) and the
    current centroids (``col_weights``, uniform by default) with the
    weighted-mean centroid update ``c_j = sum_i p_ij x_i / sum_i p_ij``.
    Every Sinkhorn solve starts cold from ``v = 1``.
    """
    x = _check_points(points, k)
    n = x.shape[0]
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if label_mode not in ("nearest", "plan"):
        raise ValueError(f"unknown label_mode {label_mode!r}")
    if col_weights is None:
        col_weights = np.full(k, 1.0 / k)
    marginals = Marginals(np.full(n, 1.0 / n), col_weights)
    if marginals.col_weights.size != k:
        raise ShapeError(f"col_weights has length {marginals.col_weights.size}, expected {k}")

    centroids = init_centroids(x, k, init or InitStrategy.zero_noise())
    trace: list[float] = []
    notes: list[str] = []
    converged = False
    tp = None
    it = 0
    while it < max_outer:
        it += 1
        cost = build_cost_matrix(x, centroids)
        tp = sinkhorn(
            cost, marginals, gamma,
            tol=sinkhorn_tol, max_iters=sinkhorn_max_iters,
            log_domain=log_domain,
        )
        new_centroids, mass = _weighted_means(x, tp.plan)
        empty = np.flatnonzero(mass < EMPTY_CLUSTER_MASS)
        for j in empty:
            idx = _farthest_point(x, new_centroids)
            new_centroids[j] = x[idx]
            msg = f"outer iteration {it}: cluster {j} lost its mass, re-seeded at point {idx}"
            log.warning(msg)
            notes.append(msg)
        trace.append(transport_objective(build_cost_matrix(x, new_centroids), tp.plan, gamma).regularized)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift <= outer_tol:
            converged = True
            break

    if label_mode == "plan":
        labels = np.argmax(tp.plan, axis=1)
    else:
        labels = nearest_centroid(x, centroids)
    if not tp.converged:
        notes.append("final Sinkhorn solve did not reach tolerance")
        converged = False
    return ClusteringResult(
        centroids=centroids,
        assignments=tp.plan,
        hard_labels=labels,
        objective_trace=trace,
        outer_iterations=it,
        converged=converged,
        label_mode=label_mode,
        transport=tp,
        warnings=notes,
    )


def _lloyd_once(x, k, centroids, max_outer, tol):
    n = x.shape[0]
    trace = []
    notes = []
    labels = None
    converged = False
    it = 0
    while it < max_outer:
        it += 1
        cost = build_cost_matrix(x, centroids)
        new_labels = np.argmin(cost, axis=1)
        counts = np.bincount(new_labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = cost[np.arange(n), new_labels].copy()
            own[counts[new_labels] <= 1] = -1.0  # never empty a donor cluster
            idx = int(np.argmax(own))
            counts[new_labels[idx]] -= 1
            counts[j] = 1
            new_labels[idx] = j
            msg = f"iteration {it}: empty cluster {j} re-seeded at point {idx}"
            log.debug(msg)
            notes.append(msg)
        onehot = np.zeros((n, k))
        onehot[np.arange(n), new_labels] = 1.0
        new_centroids, _ = _weighted_means(x, onehot)
        sse = float(np.sum((x - new_centroids[new_labels]) ** 2))
        trace.append(sse)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        stable = labels is not None and np.array_equal(labels, new_labels)
        labels, centroids = new_labels, new_centroids
        if stable or shift <= tol:
            converged = True
            break
    return centroids, labels, trace, it, converged, notes


def lloyd_kmeans(
    points,
    k: int,
    init: InitStrategy | None = None,
    *,
    max_outer: int = 100,
    restarts: int = 1,
    tol: float = 1e-9,
) -> ClusteringResult:
    """Standard Lloyd iterations with hard nearest-centroid assignments.

    The objective is the within-cluster sum of squared distances. With
    ``restarts > 1`` each run re-initializes from a seed derived from
    ``init.seed`` and the lowest-objective run is returned.
    """
    x = _check_points(points, k)
    n = x.shape[0]
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    init = init or InitStrategy.kmeans_pp()
    seeds = np.random.SeedSequence(init.seed).generate_state(restarts)
    best = None
    for r in range(restarts):
        strat = init if (r == 0 or init.kind == "provided") else init.with_seed(int(seeds[r]))
        run = _lloyd_once(x, k, init_centroids(x, k, strat), max_outer, tol)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
        if init.kind == "provided":
            break
    centroids, labels, trace, it, converged, notes = best
    assignments = np.zeros((n, k))
    assignments[np.arange(n), labels] = 1.0 / n
    return ClusteringResult(
        centroids=centroids,
        assignments=assignments,
        hard_labels=labels,
        objective_trace=trace,
        outer_iterations=it,
        converged=converged,
        label_mode="nearest",
        warnings=notes,
    )


@dataclass(frozen=True)
class ClusterConfig:
    """Clustering settings used by the episodic evaluation pipelines.

    ``query_mode`` selects how query points are attached to centroids:
    ``"nearest"`` (default) or ``"sinkhorn"`` (a balanced Sinkhorn solve of
    the query set against the fixed support centroids).
    """

    method: str = "sinkhorn"
    gamma: float = 1.0
    init_sigma: float = 1e-3
    outer_tol: float = 1e-6
    max_outer: int = 100
    sinkhorn_tol: float = INNER_SINKHORN_TOL
    sinkhorn_max_iters: int = DEFAULT_MAX_ITERS
    label_mode: str = "nearest"
    query_mode: str = "nearest"
    restarts: int = 1

    def __post_init__(self):
        if self.method not in ("sinkhorn", "lloyd"):
            raise ValueError(f"unknown clustering method {self.method!r}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.label_mode not in ("nearest", "plan"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")
        if self.query_mode not in ("nearest", "sinkhorn"):
            raise ValueError(f"unknown query_mode {self.query_mode!r}")


def cluster(points, k: int, cfg: ClusterConfig = ClusterConfig(), seed: int = 0, col_weights=None) -> ClusteringResult:
    if cfg.method == "lloyd":
        return lloyd_kmeans(points, k, InitStrategy.kmeans_pp(seed), max_outer=cfg.max_outer, restarts=cfg.restarts)
    return sinkhorn_kmeans(
        points, k, col_weights, cfg.gamma, InitStrategy.zero_noise(cfg.init_sigma, seed),
        outer_tol=cfg.outer_tol, max_outer=cfg.max_outer,
        sinkhorn_tol=cfg.sinkhorn_tol, sinkhorn_max_iters=cfg.sinkhorn_max_iters,
        label_mode=cfg.label_mode,
    )
