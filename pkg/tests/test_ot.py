import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from sfot.ot import (
    IpotConfig,
    check_simplex,
    exact_ot_oracle,
    ipot_solve,
    ipot_solve_batch,
    ot_objective,
    sinkhorn_solve,
)


def brute_force_value(C):
    T = C.shape[0]
    return min(sum(C[i, s[i]] for i in range(T)) for s in itertools.permutations(range(T))) / T


def feasibility(M, u, p):
    return max(np.abs(M.sum(1) - u).max(), np.abs(M.sum(0) - p).max())


costs_small = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                     elements=st.floats(0, 2, allow_nan=False))


class TestObjective:
    def test_identity(self):
        assert ot_objective([[1.0]], [[1.0]]) == 1.0

    def test_zero_overlap(self):
        assert ot_objective([[0, 1], [1, 0]], [[0.5, 0], [0, 0.5]]) == 0.0

    def test_hand_evaluation(self):
        # Tr(M^T C) = 0.25 * (1 + 2 + 3 + 4)
        assert ot_objective([[1, 2], [3, 4]], np.full((2, 2), 0.25)) == pytest.approx(2.5, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ot_objective(np.ones((2, 2)), np.ones((2, 3)))


class TestOracle:
    def test_swap_instance(self):
        plan, value = exact_ot_oracle([[0.0, 1.0], [1.0, 0.0]])
        assert value == 0.0
        np.testing.assert_array_equal(plan, [[0.5, 0], [0, 0.5]])

    def test_constant_cost(self):
        _, value = exact_ot_oracle(np.ones((3, 3)))
        assert value == pytest.approx(1.0)

    def test_random_5x5_matches_enumeration(self):
        C = np.random.default_rng(3).uniform(size=(5, 5))
        _, value = exact_ot_oracle(C, method="exhaustive")
        assert value == pytest.approx(brute_force_value(C), abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_exhaustive_agrees_with_hungarian_and_lp(self, seed):
        C = np.random.default_rng(seed).uniform(size=(6, 6))
        _, exhaustive = exact_ot_oracle(C, method="exhaustive")
        r, c = linear_sum_assignment(C)
        _, lp = exact_ot_oracle(C, method="lp")
        assert exhaustive == pytest.approx(C[r, c].sum() / 6, abs=1e-12)
        assert lp == pytest.approx(exhaustive, abs=1e-9)

    def test_rectangular_lp(self):
        C = np.random.default_rng(0).uniform(size=(3, 4))
        plan, value = exact_ot_oracle(C)
        assert feasibility(plan, np.full(3, 1 / 3), np.full(4, 1 / 4)) < 1e-9
        assert value == pytest.approx(ot_objective(C, plan))

    def test_too_large_for_exhaustive(self):
        with pytest.raises(ValueError, match="too large"):
            exact_ot_oracle(np.zeros((9, 9)), method="exhaustive")

    def test_exhaustive_needs_uniform_square(self):
        with pytest.raises(ValueError):
            exact_ot_oracle(np.zeros((2, 3)), method="exhaustive")


class TestIpot:
    def test_single_cell(self):
        plan = ipot_solve([[0.7]], [1.0], [1.0])
        np.testing.assert_allclose(plan.matrix, [[1.0]])
        assert ot_objective([[0.7]], plan) == pytest.approx(0.7)

    def test_swap_instance_converges_to_diagonal(self):
        plan = ipot_solve([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(plan.matrix, [[0.5, 0], [0, 0.5]], atol=1e-9)
        assert ot_objective([[0, 1], [1, 0]], plan) < 1e-9

    def test_random_instances_against_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            C = rng.uniform(size=(6, 6))
            plan = ipot_solve(C)
            _, best = exact_ot_oracle(C)
            assert abs(ot_objective(C, plan) - best) <= 1e-3
            assert feasibility(plan.matrix, plan.u, plan.p) < 1e-6

    def test_objective_history_recorded(self):
        plan = ipot_solve(np.random.default_rng(0).uniform(size=(4, 4)))
        assert len(plan.history) == plan.n_iter
        # monotonicity is recorded, not guaranteed
        assert isinstance(plan.is_monotone(), bool)

    def test_rectangular_against_lp(self):
        rng = np.random.default_rng(5)
        for shape in [(3, 5), (5, 2), (1, 4)]:
            C = rng.uniform(size=shape)
            plan = ipot_solve(C)
            _, best = exact_ot_oracle(C)
            assert feasibility(plan.matrix, plan.u, plan.p) < 1e-6
            assert ot_objective(C, plan) == pytest.approx(best, abs=1e-3)

    def test_errors(self):
        with pytest.raises(ValueError):
            ipot_solve(np.ones((2, 3)), [0.5, 0.5], [0.5, 0.5])
        with pytest.raises(ValueError):
            ipot_solve([[np.nan]])
        with pytest.raises(ValueError):
            IpotConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            check_simplex([0.5, 0.6])

    def test_non_uniform_marginals(self):
        C = np.random.default_rng(2).uniform(size=(3, 3))
        u, p = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.1, 0.3])
        plan = ipot_solve(C, u, p)
        _, best = exact_ot_oracle(C, u, p)
        assert feasibility(plan.matrix, u, p) < 1e-6
        assert ot_objective(C, plan) == pytest.approx(best, abs=1e-3)

    @settings(max_examples=40, deadline=None)
    @given(costs_small)
    def test_feasible_and_not_below_optimum(self, C):
        plan = ipot_solve(C, config=IpotConfig(outer_iters=3000))
        assert plan.matrix.min() >= -1e-12
        if plan.converged:
            assert feasibility(plan.matrix, plan.u, plan.p) < 1e-6
        _, best = exact_ot_oracle(C, method="lp")
        # a plan off its row marginals by r can undercut the optimum by at most max|C| * sum|r|
        slack = np.abs(C).max() * np.abs(plan.matrix.sum(1) - plan.u).sum()
        assert ot_objective(C, plan) >= best - 1e-9 - slack

    @settings(max_examples=25, deadline=None)
    @given(costs_small, st.floats(0.1, 10))
    def test_scale_covariance(self, C, alpha):
        base = ipot_solve(C, config=IpotConfig(epsilon=0.1, outer_iters=200))
        scaled = ipot_solve(alpha * C, config=IpotConfig(epsilon=0.1 * alpha, outer_iters=200))
        np.testing.assert_allclose(scaled.matrix, base.matrix, atol=1e-6)
        assert ot_objective(alpha * C, base) == pytest.approx(alpha * ot_objective(C, base), rel=1e-12, abs=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(costs_small, st.randoms(use_true_random=False))
    def test_row_permutation_equivariance(self, C, rnd):
        perm = list(range(C.shape[0]))
        rnd.shuffle(perm)
        u = np.linspace(1, 2, C.shape[0])
        u /= u.sum()
        base = ipot_solve(C, u, config=IpotConfig(outer_iters=300))
        permuted = ipot_solve(C[perm], u[perm], config=IpotConfig(outer_iters=300))
        np.testing.assert_allclose(permuted.matrix, base.matrix[perm], atol=1e-9)

    @pytest.mark.parametrize("shift", [-3.0, -0.1, 0.5, 4.0])
    def test_constant_shift(self, shift):
        rng = np.random.default_rng(7)
        for _ in range(5):
            C = rng.uniform(size=(5, 5))
            _, best = exact_ot_oracle(C)
            _, shifted_best = exact_ot_oracle(C + shift)
            assert shifted_best == pytest.approx(best + shift, abs=1e-12)
            plan = ipot_solve(C + shift)
            assert ot_objective(C + shift, plan) == pytest.approx(best + shift, abs=1e-3)
            # same plan as the unshifted problem, up to solver tolerance
            np.testing.assert_allclose(plan.matrix, ipot_solve(C).matrix, atol=1e-6)


class TestBatch:
    def test_matches_single_solves(self):
        rng = np.random.default_rng(0)
        shapes = [(3, 4), (5, 5), (1, 2), (4, 1)]
        padded = np.full((4, 5, 5), 123.0)
        for b, s in enumerate(shapes):
            padded[b, : s[0], : s[1]] = rng.uniform(size=s)
        plans = ipot_solve_batch(padded, [s[0] for s in shapes], [s[1] for s in shapes])
        for b, (r, c) in enumerate(shapes):
            single = ipot_solve(padded[b, :r, :c]).matrix
            np.testing.assert_allclose(plans[b, :r, :c], single, atol=1e-8)
            assert np.all(plans[b, r:, :] == 0) and np.all(plans[b, :, c:] == 0)


class TestSinkhorn:
    def test_single_cell(self):
        np.testing.assert_allclose(sinkhorn_solve([[0.3]], reg=0.5).matrix, [[1.0]])

    def test_high_regularization_is_flat(self):
        plan = sinkhorn_solve([[0, 1], [1, 0]], reg=10.0)
        np.testing.assert_allclose(plan.matrix, 0.25, atol=0.02)
        # closed form for the symmetric 2x2 case: diagonal mass 0.5 * sigmoid(1 / reg)
        diag = 0.5 / (1 + np.exp(-0.1))
        np.testing.assert_allclose(plan.matrix, [[diag, 0.5 - diag], [0.5 - diag, diag]], atol=1e-12)

    def test_small_regularization_near_oracle(self):
        C = np.random.default_rng(4).uniform(size=(5, 5))
        plan = sinkhorn_solve(C, reg=0.01, iters=5000)
        assert abs(ot_objective(C, plan) - exact_ot_oracle(C)[1]) < 5e-2

    def test_underflow_signalled(self):
        with pytest.raises(FloatingPointError):
            sinkhorn_solve([[0.0, 1000.0], [1000.0, 0.0]], reg=0.1)

    def test_bad_reg(self):
        with pytest.raises(ValueError):
            sinkhorn_solve([[1.0]], reg=0)
