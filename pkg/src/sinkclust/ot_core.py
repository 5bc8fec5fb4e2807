"""Entropic optimal transport between weighted point sets.

The solver works on a dense squared-Euclidean cost matrix and enforces
row (data) and column (centroid) marginals by alternating Sinkhorn scaling.
The log-domain variant keeps the dual potentials as logarithms and uses
log-sum-exp reductions so that small regularization constants do not
underflow the Gibbs kernel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 1000


def _as_matrix(a, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def build_cost_matrix(points, centroids) -> np.ndarray:
    """Pairwise squared L2 distances, shape ``(n, k)``.

    Computed from explicit differences rather than the ``|x|^2 - 2x.c + |c|^2``
    expansion, so entries are exactly zero for coincident rows and never
    negative.
    """
    x = _as_matrix(points, "points")
    c = _as_matrix(centroids, "centroids")
    if x.shape[1] != c.shape[1]:
        raise ShapeError(
            f"dimension mismatch: points have d={x.shape[1]}, centroids d={c.shape[1]}"
        )
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


@dataclass(frozen=True)
class Marginals:
    """Row and column weights of a transport problem, each summing to one."""

    row_weights: np.ndarray
    col_weights: np.ndarray

    def __post_init__(self):
        for name in ("row_weights", "col_weights"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.ndim != 1 or w.size == 0:
                raise ShapeError(f"{name} must be a non-empty vector")
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError(f"{name} must be finite and strictly positive")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1 (got {w.sum():.12g})")
            object.__setattr__(self, name, w)

    @classmethod
    def uniform(cls, n: int, k: int) -> "Marginals":
        return cls(np.full(n, 1.0 / n), np.full(k, 1.0 / k))


@dataclass
class SinkhornState:
    """Dual scalings and convergence record of one Sinkhorn solve.

    In log-domain mode ``u``, ``v`` and ``kernel`` hold logarithms
    (``log u``, ``log v`` and ``-cost / gamma``).
    """

    u: np.ndarray
    v: np.ndarray
    kernel: np.ndarray
    gamma: float
    iterations_run: int
    max_marginal_violation: float
    converged: bool
    log_domain: bool


@dataclass
class TransportPlan:
    plan: np.ndarray
    marginals: Marginals
    state: SinkhornState = field(repr=False)

    @property
    def converged(self) -> bool:
        return self.state.converged

    def marginal_violation(self) -> float:
        return _violation(self.plan, self.marginals)


def _violation(plan, marginals):
    rows = np.max(np.abs(plan.sum(axis=1) - marginals.row_weights))
    cols = np.max(np.abs(plan.sum(axis=0) - marginals.col_weights))
    return float(max(rows, cols))


def _check_inputs(cost, marginals, gamma):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix contains non-finite values")
    if cost.shape != (marginals.row_weights.size, marginals.col_weights.size):
        raise ShapeError(
            f"cost shape {cost.shape} does not match marginals "
            f"({marginals.row_weights.size}, {marginals.col_weights.size})"
        )
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return cost


def sinkhorn(
    cost,
    marginals: Marginals,
    gamma: float,
    *,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    log_domain: bool = True,
    init_v=None,
    newton_after: int | None = 100,
) -> TransportPlan:
    """Solve ``min <p, cost> - gamma * H(p)`` under the given marginals.

    Each iteration rescales rows then columns. Iteration stops once the
    largest marginal violation is ``<= tol`` or after ``max_iters``
    iterations, in which case ``state.converged`` is False.

    ``init_v`` warm-starts the column scaling (``log v`` in log-domain
    mode); the default is ``v = 1``. In log-domain mode, iterations past
    ``newton_after`` are Newton steps on ``log v`` (``None`` disables this).
    """
    cost = _check_inputs(cost, marginals, gamma)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if log_domain:
        return _sinkhorn_log(cost, marginals, gamma, tol, max_iters, init_v, newton_after)
    return _sinkhorn_plain(cost, marginals, gamma, tol, max_iters, init_v)


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


# |log u|, |log v| beyond this are folded into the log potentials
_ABSORB = 30.0


def _sinkhorn_log(cost, marginals, gamma, tol, max_iters, init_v, newton_after):
    """Log-stabilized Sinkhorn.

    The potentials ``f = log u`` and ``g = log v`` are set by exact
    log-sum-exp sweeps. Further sweeps run as multiplicative updates on the
    rescaled kernel ``exp(-cost/gamma + f + g)``, whose entries are bounded
    by the marginal weights; the scalings are absorbed back into ``f, g``
    whenever they drift. Iterates are identical to the pure log-domain
    recursion up to rounding.

    Sinkhorn contracts very slowly when the plan is close to block-diagonal
    (well-separated clusters at small ``gamma``). If ``newton_after`` sweeps
    have not reached ``tol``, the remaining budget is spent on Newton steps
    for the column potentials (with gamma continuation for badly scaled
    costs), which converge to the same fixed point.
    """
    n, k = cost.shape
    r, c = marginals.row_weights, marginals.col_weights
    log_k = -cost / gamma
    log_r, log_c = np.log(r), np.log(c)
    g = np.zeros(k) if init_v is None else np.array(init_v, dtype=np.float64)
    if g.shape != (k,):
        raise ShapeError(f"init_v must have shape ({k},)")

    budget = max_iters if newton_after is None else min(max_iters, newton_after)
    f, g, it, violation = _stabilized_sweeps(log_k, log_r, log_c, r, g, tol, budget)
    if violation > tol and it < max_iters:
        g, used, stalled = _continuation_newton(cost, gamma, r, c, g, tol, max_iters - it)
        it += used
        f = log_r - _lse(log_k + g[None, :], 1)
        if stalled and it < max_iters:
            # Newton made no progress (nearly one-hot plans): finish with sweeps
            f, g, used, violation = _stabilized_sweeps(log_k, log_r, log_c, r, g, tol, max_iters - it)
            it += used
    log_p = log_k + f[:, None] + g[None, :]
    plan = np.exp(log_p)
    if not np.all(np.isfinite(plan)):
        raise NumericError("log-domain Sinkhorn produced a non-finite plan")
    violation = _violation(plan, marginals)
    converged = violation <= tol
    if not converged:
        log.warning("Sinkhorn did not converge in %d iterations (violation %.3g)", it, violation)
    state = SinkhornState(f, g, log_k, float(gamma), it, violation, converged, True)
    return TransportPlan(plan, marginals, state)


def _stabilized_sweeps(log_k, log_r, log_c, r, g, tol, budget):
    """Up to ``budget`` Sinkhorn iterations from column potential ``g``.

    Returns ``(f, g, iterations, row_violation)``.
    """
    n, k = log_k.shape
    c = np.exp(log_c)

    def log_sweep(g):
        f = log_r - _lse(log_k + g[None, :], 1)
        g = log_c - _lse(log_k + f[:, None], 0)
        return f, g

    f, g = log_sweep(g)
    it = 1
    kt = np.exp(log_k + f[:, None] + g[None, :])
    u, v = np.ones(n), np.ones(k)
    violation = float(np.max(np.abs(kt.sum(axis=1) - r)))
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        while violation > tol and it < budget:
            it += 1
            u = r / (kt @ v)
            v = c / (kt.T @ u)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))) or np.any(u == 0) or np.any(v == 0):
                # the rescaled kernel lost a row or column to underflow
                f, g = log_sweep(g)
                u, v = np.ones(n), np.ones(k)
                kt = np.exp(log_k + f[:, None] + g[None, :])
                violation = float(np.max(np.abs(kt.sum(axis=1) - r)))
                continue
            violation = float(np.max(np.abs(u * (kt @ v) - r)))
            lu, lv = np.log(u), np.log(v)
            if max(np.max(np.abs(lu)), np.max(np.abs(lv))) > _ABSORB:
                f, g = f + lu, g + lv
                u, v = np.ones(n), np.ones(k)
                kt = np.exp(log_k + f[:, None] + g[None, :])
    return f + np.log(u), g + np.log(v), it, violation


def _sinkhorn_plain(cost, marginals, gamma, tol, max_iters, init_v):
    n, k = cost.shape
    kernel = np.exp(-cost / gamma)
    if np.any(kernel.sum(axis=1) == 0) or np.any(kernel.sum(axis=0) == 0):
        raise NumericError(
            "Gibbs kernel underflowed to zero; gamma is too small for the cost "
            "scale. Use log_domain=True."
        )
    v = np.ones(k) if init_v is None else np.array(init_v, dtype=np.float64)
    if v.shape != (k,):
        raise ShapeError(f"init_v must have shape ({k},)")

    violation = np.inf
    it = 0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        while it < max_iters:
            it += 1
            u = marginals.row_weights / (kernel @ v)
            v = marginals.col_weights / (kernel.T @ u)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise NumericError(
                    "plain Sinkhorn overflowed (NaN/Inf in the dual scalings); "
                    "use log_domain=True"
                )
            row_sums = u * (kernel @ v)
            violation = float(np.max(np.abs(row_sums - marginals.row_weights)))
            if violation <= tol:
                break
        plan = u[:, None] * kernel * v[None, :]
    if not np.all(np.isfinite(plan)):
        raise NumericError("plain Sinkhorn produced a non-finite plan; use log_domain=True")
    violation = _violation(plan, marginals)
    converged = violation <= tol
    if not converged:
        log.warning("Sinkhorn did not converge in %d iterations (violation %.3g)", it, violation)
    state = SinkhornState(u, v, kernel, float(gamma), it, violation, converged, False)
    return TransportPlan(plan, marginals, state)


# continuation levels are spaced so that the cost range spans at most this
# many units of gamma at the coarsest level
_CONTINUATION_SPAN = 32.0


def _continuation_newton(cost, gamma, r, c, g, tol, budget):
    """Newton on the column potentials, warm-started through larger gammas.

    For ``cost range / gamma`` above ``_CONTINUATION_SPAN`` the semi-dual is
    badly conditioned and a cold Newton spends its budget in the damped
    phase. Solving at ``gamma * 2^j`` for decreasing ``j`` and rescaling the
    potentials (``g`` is measured in units of ``1/gamma``) gives each level a
    start inside the fast-convergence region. The final level is the target
    problem. Returns ``(g, steps, stalled)``.
    """
    spread = float(cost.max() - cost.min())
    levels = max(0, int(np.ceil(np.log2(max(spread / gamma, 1.0) / _CONTINUATION_SPAN))))
    used = 0
    if levels:
        g = g * (gamma / (gamma * 2.0**levels))
        for j in range(levels, 0, -1):
            gj = gamma * 2.0**j
            g, steps, _ = _newton_columns(-cost / gj, r, c, g, max(tol, 1e-9), max(1, (budget - used) // (j + 1)))
            used += steps
            g = g * 2.0  # potentials at gamma * 2^(j-1)
    g, steps, stalled = _newton_columns(-cost / gamma, r, c, g, tol, budget - used)
    return g, used + steps, stalled


def _newton_columns(log_k, r, c, g, tol, budget):
    """Newton ascent on the semi-dual ``c.g - sum_i r_i lse_j(log_k_ij + g_j)``.

    Rows are matched exactly for any ``g``; the gradient is the column
    residual ``c - s(g)``. Returns the new ``g``, the number of steps and
    whether the line search gave up before reaching ``tol``.
    """

    def evaluate(g):
        z = log_k + g[None, :]
        lse = _lse(z, 1)
        pi = np.exp(z - lse[:, None])
        s = r @ pi
        return c @ g - r @ lse, pi, s

    phi, pi, s = evaluate(g)
    grad = c - s
    used = 0
    while np.max(np.abs(grad)) > tol and used < budget:
        used += 1
        hess = np.diag(s) - (r[:, None] * pi).T @ pi
        # pseudo-inverse: drops the constant (gauge) direction; weakly coupled
        # cluster blocks show up as tiny but usable eigenvalues
        w, vecs = np.linalg.eigh(hess)
        keep = w > 1e-16 * w[-1]
        step = vecs[:, keep] @ ((vecs[:, keep].T @ grad) / w[keep])
        slope = float(grad @ step)
        if not slope > 0:
            return g, used, True
        t = 1.0
        while True:
            phi_t, pi_t, s_t = evaluate(g + t * step)
            grad_t = c - s_t
            if phi_t >= phi + 1e-4 * t * slope:
                break
            # near the optimum phi stops resolving; fall back to the residual
            flat = abs(phi_t - phi) <= 1e-13 * (1.0 + abs(phi))
            if flat and np.max(np.abs(grad_t)) < np.max(np.abs(grad)):
                break
            t *= 0.5
            if t < 1e-12:
                return g, used, True
        g, phi, pi, s, grad = g + t * step, phi_t, pi_t, s_t, grad_t
    return g, used, False


def entropy(plan) -> float:
    """Shannon entropy ``-sum p log p`` with ``0 log 0 = 0``."""
    p = np.asarray(plan, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("plan entries must be non-negative")
    pos = p[p > 0]
    return float(-np.sum(pos * np.log(pos)))


@dataclass(frozen=True)
class TransportObjective:
    cost_term: float
    entropy: float
    regularized: float


def transport_objective(cost, plan, gamma: float) -> TransportObjective:
    """Transport cost, entropy and the entropic objective of a plan.

    ``plan`` may be a :class:`TransportPlan` or a bare matrix.
    """
    p = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    if p.shape != cost.shape:
        raise ShapeError(f"plan shape {p.shape} does not match cost shape {cost.shape}")
    cost_term = float(np.sum(p * cost))
    h = entropy(p)
    return TransportObjective(cost_term, h, cost_term - gamma * h)
