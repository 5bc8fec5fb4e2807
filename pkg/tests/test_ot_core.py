import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sinkclust.errors import NumericError, ShapeError
from sinkclust.ot_core import (
    Marginals,
    build_cost_matrix,
    entropy,
    sinkhorn,
    transport_objective,
)

# a = 0.5 / (1 + e^-1): diagonal mass of the 2x2 plan for cost [[0,1],[1,0]], gamma 1
A_2X2 = 0.36552928931500245
COST_TERM_2X2 = 0.2689414213699951


def grid_oracle_2x2(cost, r, c, gamma):
    """Minimum of the regularized objective over the one free entry ``a``.

    A 2x2 plan with fixed marginals is [[a, r0-a], [c0-a, r1-c0+a]].
    Coarse grid, then two rounds of local refinement.
    """
    lo, hi = max(0.0, c[0] - r[1]), min(r[0], c[0])

    def f(a):
        p = np.stack([a, r[0] - a, c[0] - a, r[1] - c[0] + a])
        p = np.clip(p, 1e-300, None)
        return (p * cost.ravel()[:, None]).sum(0) + gamma * (p * np.log(p)).sum(0)

    a = np.linspace(lo, hi, 20001)[1:-1]
    for _ in range(3):
        vals = f(a)
        i = int(np.argmin(vals))
        step = a[1] - a[0]
        a = np.linspace(max(lo, a[i] - step), min(hi, a[i] + step), 20001)[1:-1]
    vals = f(a)
    i = int(np.argmin(vals))
    return a[i], vals[i]


def test_oracle_reproduces_closed_form():
    a, _ = grid_oracle_2x2(np.array([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5], [0.5, 0.5], 1.0)
    assert a == pytest.approx(A_2X2, abs=1e-8)


class TestCostMatrix:
    def test_identical_point(self):
        assert build_cost_matrix([[0, 0]], [[0, 0]]).tolist() == [[0.0]]

    def test_unit_vectors(self):
        assert build_cost_matrix([[1, 0], [0, 1]], [[0, 0]]).tolist() == [[1.0], [1.0]]

    def test_hand_expansion(self):
        assert build_cost_matrix([[3, 4]], [[0, 0], [3, 0]]).tolist() == [[25.0, 16.0]]

    def test_matches_scalar_loop(self, rng):
        x, c = rng.normal(size=(7, 3)), rng.normal(size=(4, 3))
        loop = np.array([[sum((x[i, t] - c[j, t]) ** 2 for t in range(3)) for j in range(4)] for i in range(7)])
        got = build_cost_matrix(x, c)
        assert np.all(got >= 0)
        np.testing.assert_allclose(got, loop, rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            build_cost_matrix([[0, 0]], [[0, 0, 0]])

    def test_non_finite(self):
        with pytest.raises(NumericError):
            build_cost_matrix([[np.nan, 0]], [[0, 0]])


class TestMarginals:
    def test_rejects_zero_weight(self):
        with pytest.raises(ValueError):
            Marginals(np.array([1.0, 0.0]), np.array([0.5, 0.5]))

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            Marginals(np.array([0.5, 0.6]), np.array([0.5, 0.5]))

    def test_uniform(self):
        m = Marginals.uniform(4, 2)
        assert m.row_weights.tolist() == [0.25] * 4 and m.col_weights.tolist() == [0.5, 0.5]


class TestSinkhorn:
    @pytest.mark.parametrize("log_domain", [True, False])
    def test_single_centroid(self, rng, log_domain):
        r = rng.uniform(0.1, 1, 5)
        r /= r.sum()
        tp = sinkhorn(rng.uniform(0, 5, (5, 1)), Marginals(r, np.array([1.0])), 1.0, log_domain=log_domain)
        np.testing.assert_allclose(tp.plan[:, 0], r, atol=1e-15)

    def test_zero_cost_gives_outer_product(self):
        tp = sinkhorn(np.zeros((2, 2)), Marginals.uniform(2, 2), 1.0)
        np.testing.assert_allclose(tp.plan, 0.25, atol=1e-15)

    @pytest.mark.parametrize("log_domain", [True, False])
    def test_closed_form_2x2(self, log_domain):
        tp = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), Marginals.uniform(2, 2), 1.0, log_domain=log_domain)
        assert tp.plan[0, 0] == pytest.approx(A_2X2, abs=1e-7)
        assert tp.plan[0, 1] == pytest.approx(0.5 - A_2X2, abs=1e-7)
        assert tp.converged

    def test_state_fields(self):
        tp = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), Marginals.uniform(2, 2), 2.0, log_domain=False)
        s = tp.state
        assert s.gamma == 2.0 and s.iterations_run >= 1
        np.testing.assert_allclose(s.kernel, np.exp(-np.array([[0.0, 1.0], [1.0, 0.0]]) / 2.0))
        np.testing.assert_allclose(s.u[:, None] * s.kernel * s.v[None, :], tp.plan, atol=1e-15)
        assert s.max_marginal_violation <= 1e-6

    def test_plan_is_scaled_kernel_log_domain(self, rng):
        cost = rng.uniform(0, 10, (6, 3))
        tp = sinkhorn(cost, Marginals.uniform(6, 3), 0.7)
        s = tp.state
        assert s.log_domain
        np.testing.assert_allclose(s.kernel, -cost / 0.7)
        np.testing.assert_allclose(np.exp(s.u[:, None] + s.kernel + s.v[None, :]), tp.plan, rtol=1e-12)

    def test_non_convergence_is_flagged(self, rng):
        cost = rng.uniform(0, 100, (30, 5))
        tp = sinkhorn(cost, Marginals.uniform(30, 5), 0.01, max_iters=1, newton_after=None)
        assert not tp.converged
        assert tp.state.iterations_run == 1
        assert tp.marginal_violation() > 1e-6

    def test_plain_mode_underflow_asks_for_log_domain(self):
        cost = np.array([[0.0, 1e4], [1e4, 0.0]]) + 1e4
        with pytest.raises(NumericError, match="log_domain"):
            sinkhorn(cost, Marginals.uniform(2, 2), 1e-3, log_domain=False)

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_rejects_bad_gamma(self, gamma):
        with pytest.raises(ValueError):
            sinkhorn(np.zeros((2, 2)), Marginals.uniform(2, 2), gamma)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sinkhorn(np.zeros((3, 2)), Marginals.uniform(2, 2), 1.0)

    def test_grid_oracle_random_instances(self, rng):
        for _ in range(20):
            cost = rng.uniform(0, 5, (2, 2))
            gamma = rng.uniform(0.2, 3)
            r = rng.dirichlet([2, 2])
            c = rng.dirichlet([2, 2])
            _, best = grid_oracle_2x2(cost, r, c, gamma)
            # objective error is first order in the marginal violation, so
            # 1e-6 accuracy in the objective needs a tighter solve than 1e-6
            tp = sinkhorn(cost, Marginals(r, c), gamma, tol=1e-9)
            assert abs(transport_objective(cost, tp, gamma).regularized - best) <= 1e-6


# -- properties ---------------------------------------------------------------

def _random_instance(seed, n, k, scale=10.0):
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, scale, (n, k))
    r, c = rng.dirichlet(np.full(n, 3.0)), rng.dirichlet(np.full(k, 3.0))
    return cost, Marginals(r, c)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 20), st.integers(1, 20), st.floats(0.5, 5))
def test_marginal_feasibility_and_log_plain_agreement(seed, n, k, gamma):
    cost, marg = _random_instance(seed, n, k)
    log_plan = sinkhorn(cost, marg, gamma, tol=1e-12)
    plain = sinkhorn(cost, marg, gamma, tol=1e-12, log_domain=False, max_iters=100_000)
    for tp in (log_plan, plain):
        assert tp.converged
        assert np.abs(tp.plan.sum(1) - marg.row_weights).max() <= 1e-6
        assert np.abs(tp.plan.sum(0) - marg.col_weights).max() <= 1e-6
        assert np.all(tp.plan >= 0)
    np.testing.assert_allclose(log_plan.plan, plain.plan, rtol=0, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 15), st.integers(2, 8))
def test_log_domain_stable_at_tiny_gamma(seed, n, k):
    cost, marg = _random_instance(seed, n, k, scale=100.0)
    tp = sinkhorn(cost, marg, 1e-3)
    assert np.all(np.isfinite(tp.plan))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(2, 6), st.floats(0.1, 10))
def test_scale_covariance(seed, n, k, s):
    cost, marg = _random_instance(seed, n, k)
    a = sinkhorn(cost, marg, 1.0, tol=1e-12).plan
    b = sinkhorn(cost * s, marg, s, tol=1e-12).plan
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(2, 6))
def test_entropy_non_decreasing_in_gamma(seed, n, k):
    cost, marg = _random_instance(seed, n, k)
    h = [entropy(sinkhorn(cost, marg, g, tol=1e-12).plan) for g in (0.01, 0.1, 1.0, 10.0)]
    assert all(b >= a - 1e-9 for a, b in zip(h, h[1:]))


class TestObjective:
    def test_uniform_plan_entropy(self):
        obj = transport_objective(np.zeros((2, 2)), np.full((2, 2), 0.25), 1.0)
        assert obj.cost_term == 0.0
        assert obj.entropy == pytest.approx(math.log(4), abs=1e-15)
        assert obj.regularized == pytest.approx(-math.log(4), abs=1e-15)

    def test_zero_entry_contributes_nothing(self):
        assert entropy(np.array([[0.5, 0.0], [0.0, 0.5]])) == pytest.approx(math.log(2), abs=1e-15)

    def test_cost_term_of_2x2_plan(self):
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        tp = sinkhorn(cost, Marginals.uniform(2, 2), 1.0, tol=1e-12)
        assert transport_objective(cost, tp, 1.0).cost_term == pytest.approx(COST_TERM_2X2, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            transport_objective(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)

    def test_negative_plan_rejected(self):
        with pytest.raises(ValueError):
            entropy(np.array([[-0.1, 0.6]]))
