import math

import numpy as np
import pytest
from scipy.optimize import linprog

from hmatch.encoders import DemanderSet, SupplierSet, build_demanders_subpixel, build_suppliers
from hmatch.errors import BalanceError, NumericError
from hmatch.grid import GridGeometry, Heatmap, Keypoint, make_rng
from hmatch.transport import (CostMatrix, SinkhornConfig, assert_conserved, build_cost, compare_with_exact, emd_exact,
                              marginal_residual, random_problem, sinkhorn, sinkhorn_batch)


def point_set(masses, locations, kind=SupplierSet):
    return kind(masses=np.asarray(masses, dtype=np.float64), locations=np.asarray(locations, dtype=np.float64))


def lp_oracle(a, b, cost):
    """ Minimize <C, p> over the transportation polytope with a dense LP."""
    n, m = cost.shape
    rows = np.kron(np.eye(n), np.ones(m))
    cols = np.kron(np.ones(n), np.eye(m))
    result = linprog(cost.reshape(-1), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([a, b]),
                     bounds=(0, None), method='highs')
    assert result.status == 0
    return result.fun


class TestCost:

    def test_triangle(self):
        cost = build_cost(point_set([1.0], [[0.0, 0.0]]), point_set([1.0], [[3.0, 4.0]], DemanderSet))
        assert cost.entries.tolist() == [[5.0]]

    def test_grid_column(self):
        suppliers = build_suppliers(Heatmap(GridGeometry(width=2, height=2), np.ones((2, 2))))
        cost = build_cost(suppliers, point_set([1.0], [[0.0, 0.0]], DemanderSet))
        assert cost.shape == (4, 1)
        assert np.allclose(cost.entries[:, 0], [0.0, 1.0, 1.0, math.sqrt(2)], rtol=0, atol=1e-15)

    @pytest.mark.parametrize('entries', [
        [1.0, 2.0],
        [[1.0, -1.0]],
        [[1.0, np.inf]],
    ])
    def test_invalid(self, entries):
        with pytest.raises(ValueError):
            CostMatrix(entries)

    def test_empty(self):
        with pytest.raises(ValueError):
            build_cost(point_set([], np.zeros((0, 2))), point_set([1.0], [[0.0, 0.0]], DemanderSet))


class TestSinkhornConfig:

    @pytest.mark.parametrize('kwargs', [
        dict(lam=0.0),
        dict(lam=-1.0),
        dict(iterations=0),
        dict(tol=0.0),
        dict(check_every=0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SinkhornConfig(**kwargs)

    def test_defaults(self):
        cfg = SinkhornConfig()
        assert (cfg.lam, cfg.iterations, cfg.log_domain) == (1.0, 1000, True)


class TestExact:

    def test_single_route(self):
        s, d = point_set([1.0], [[0.0, 0.0]]), point_set([1.0], [[3.0, 4.0]], DemanderSet)
        plan = emd_exact(s, d, build_cost(s, d))
        assert plan.coupling.tolist() == [[1.0]]
        assert plan.objective == 5.0

    def test_identity_transport(self):
        locations = [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]
        masses = [0.2, 0.3, 0.5]
        s, d = point_set(masses, locations), point_set(masses, locations, DemanderSet)
        plan = emd_exact(s, d, build_cost(s, d))
        assert plan.objective == 0.0
        assert plan.marginal_residual <= 1e-9

    @pytest.mark.parametrize('seed', range(10))
    def test_against_lp(self, seed):
        s, d, cost = random_problem(6, 4, make_rng(seed))
        plan = emd_exact(s, d, cost)
        assert abs(plan.objective - lp_oracle(s.masses, d.masses, cost.entries)) <= 1e-8
        assert np.all(plan.coupling >= 0)
        assert plan.marginal_residual <= 1e-9

    def test_unbalanced(self):
        s, d = point_set([0.5, 0.5], [[0, 0], [1, 0]]), point_set([0.7], [[0, 1]], DemanderSet)
        with pytest.raises(BalanceError) as info:
            emd_exact(s, d, build_cost(s, d))
        assert info.value.supply == 1.0
        assert info.value.demand == 0.7


class TestSinkhorn:

    @pytest.mark.parametrize('lam', [0.1, 1.0, 1000.0])
    def test_single_route(self, lam):
        s, d = point_set([1.0], [[0.0, 0.0]]), point_set([1.0], [[3.0, 4.0]], DemanderSet)
        plan = sinkhorn(s, d, build_cost(s, d), SinkhornConfig(lam=lam, iterations=3))
        assert plan.coupling.tolist() == [[1.0]]
        assert plan.objective == 5.0
        assert plan.iterations == 3

    def test_residual_at_default_settings(self):
        comparison = compare_with_exact(64, 4, trials=5, cfg=SinkhornConfig(lam=1.0, iterations=1000), seed=3)
        assert comparison.max_residual <= 1e-6
        assert comparison.trials == 5

    def test_close_to_exact_at_large_lambda(self):
        comparison = compare_with_exact(6, 4, trials=10, cfg=SinkhornConfig(lam=100.0), seed=1)
        assert comparison.max_gap <= 1e-2
        assert comparison.mean_gap <= comparison.max_gap

    def test_regularized_objective_above_exact(self):
        s, d, cost = random_problem(8, 4, make_rng(11))
        assert sinkhorn(s, d, cost).objective >= emd_exact(s, d, cost).objective - 1e-12

    def test_plan_is_coupling(self):
        geometry = GridGeometry(width=6, height=6)
        suppliers = build_suppliers(Heatmap(geometry, make_rng(0).normal(size=(6, 6))))
        demanders = build_demanders_subpixel(Keypoint(2.3, 3.9), geometry)
        plan = sinkhorn(suppliers, demanders, build_cost(suppliers, demanders))
        assert plan.coupling.shape == (36, 4)
        assert np.all(plan.coupling >= 0)
        assert plan.marginal_residual <= 1e-6
        assert np.allclose(plan.coupling.sum(axis=0), demanders.masses, rtol=0, atol=1e-12)

    def test_kernel_matches_log_domain(self):
        s, d, cost = random_problem(10, 4, make_rng(5))
        log_plan = sinkhorn(s, d, cost, SinkhornConfig(iterations=200))
        kernel_plan = sinkhorn(s, d, cost, SinkhornConfig(iterations=200, log_domain=False))
        assert np.allclose(log_plan.coupling, kernel_plan.coupling, rtol=0, atol=1e-12)

    def test_kernel_underflow(self):
        s, d = point_set([1.0], [[0.0, 0.0]]), point_set([1.0], [[3.0, 4.0]], DemanderSet)
        with pytest.raises(NumericError) as info:
            sinkhorn(s, d, build_cost(s, d), SinkhornConfig(lam=1000.0, log_domain=False))
        assert 'log_domain' in str(info.value)

    def test_early_stop(self):
        s, d = point_set([1.0], [[0.0, 0.0]]), point_set([1.0], [[3.0, 4.0]], DemanderSet)
        plan = sinkhorn(s, d, build_cost(s, d), SinkhornConfig(tol=1e-8, check_every=10))
        assert plan.iterations == 10

    def test_unbalanced(self):
        s, d = point_set([0.5, 0.5], [[0, 0], [1, 0]]), point_set([0.5], [[0, 1]], DemanderSet)
        with pytest.raises(BalanceError):
            sinkhorn(s, d, build_cost(s, d))


class TestBatch:

    def test_padded_batch_matches_single(self):
        rng = make_rng(9)
        big = random_problem(3, 2, rng)
        small = random_problem(2, 2, rng)
        a = np.stack([big[0].masses, np.append(small[0].masses, 0.0)])
        b = np.stack([big[1].masses, small[1].masses])
        cost = np.stack([big[2].entries, np.vstack([small[2].entries, np.zeros(2)])])
        objectives, residuals, couplings = sinkhorn_batch(a, b, cost)
        assert couplings.shape == (2, 3, 2)
        assert math.isclose(objectives[0], sinkhorn(*big).objective, rel_tol=0, abs_tol=1e-10)
        assert math.isclose(objectives[1], sinkhorn(*small).objective, rel_tol=0, abs_tol=1e-10)
        assert np.all(residuals <= 1e-6)

    def test_unbalanced_member(self):
        a = np.array([[0.5, 0.5], [0.5, 0.4]])
        b = np.array([[1.0], [1.0]])
        with pytest.raises(BalanceError):
            sinkhorn_batch(a, b, np.ones((2, 2, 1)))


def test_marginal_residual():
    coupling = np.array([[0.5, 0.0], [0.0, 0.4]])
    assert math.isclose(marginal_residual(coupling, np.array([0.5, 0.5]), np.array([0.5, 0.5])), 0.1)


def test_compare_needs_trials():
    with pytest.raises(ValueError):
        compare_with_exact(3, 2, trials=0)


def permuted(suppliers, cost, order):
    return SupplierSet(masses=suppliers.masses[order], locations=suppliers.locations[order]), \
        CostMatrix(cost.entries[order])


def scaled(suppliers, demanders, alpha):
    s = SupplierSet(masses=suppliers.masses, locations=alpha * suppliers.locations)
    d = DemanderSet(masses=demanders.masses, locations=alpha * demanders.locations)
    return s, d, build_cost(s, d)


class TestInvariants:

    @pytest.mark.parametrize('seed', range(5))
    @pytest.mark.parametrize('solve', [emd_exact, sinkhorn])
    def test_supplier_permutation(self, seed, solve):
        rng = make_rng(seed)
        s, d, cost = random_problem(7, 4, rng)
        ps, pcost = permuted(s, cost, rng.permutation(7))
        assert abs(solve(ps, d, pcost).objective - solve(s, d, cost).objective) <= 1e-12

    @pytest.mark.parametrize('alpha', [0.25, 2.5, 10.0])
    def test_exact_scale_covariance(self, alpha):
        s, d, cost = random_problem(6, 4, make_rng(2))
        objective = emd_exact(s, d, cost).objective
        assert abs(emd_exact(*scaled(s, d, alpha)).objective - alpha * objective) <= 1e-9

    @pytest.mark.parametrize('alpha', [0.25, 2.5, 10.0])
    def test_regularized_scale_covariance(self, alpha):
        # scaling every cost by alpha keeps the kernel when lambda is divided by alpha
        s, d, cost = random_problem(6, 4, make_rng(3))
        objective = sinkhorn(s, d, cost, SinkhornConfig(lam=1.0)).objective
        rescaled = sinkhorn(*scaled(s, d, alpha), SinkhornConfig(lam=1.0 / alpha)).objective
        assert abs(rescaled - alpha * objective) <= 1e-9

    @pytest.mark.parametrize('seed', range(10))
    def test_entropic_bias_shrinks(self, seed):
        s, d, cost = random_problem(6, 4, make_rng(seed))
        exact = emd_exact(s, d, cost).objective
        gap_10 = sinkhorn(s, d, cost, SinkhornConfig(lam=10.0)).objective - exact
        gap_100 = sinkhorn(s, d, cost, SinkhornConfig(lam=100.0, iterations=5000)).objective - exact
        assert gap_10 >= -1e-9
        assert gap_10 >= gap_100 - 1e-9

    @pytest.mark.parametrize('seed', range(5))
    def test_plans_conserve_mass(self, seed):
        s, d, cost = random_problem(9, 4, make_rng(seed))
        for plan in (emd_exact(s, d, cost), sinkhorn(s, d, cost), sinkhorn(s, d, cost, SinkhornConfig(iterations=3))):
            assert np.all(plan.coupling >= 0)
            assert np.all(np.abs(plan.coupling.sum(axis=1) - s.masses) <= plan.marginal_residual + 1e-15)
            assert np.all(np.abs(plan.coupling.sum(axis=0) - d.masses) <= plan.marginal_residual + 1e-15)

    @pytest.mark.parametrize('coupling,residual', [
        ([[0.5, 0.0], [0.0, 0.4]], 0.0),
        ([[0.6, -0.1], [0.0, 0.5]], 0.1),
    ])
    def test_conservation_check(self, coupling, residual):
        half = np.array([0.5, 0.5])
        with pytest.raises(AssertionError):
            assert_conserved(np.array(coupling), half, half, residual)


@pytest.mark.slow
class TestOracleScale:

    def test_gap_at_large_lambda(self):
        comparison = compare_with_exact(64, 4, trials=200, cfg=SinkhornConfig(lam=100.0), seed=0)
        assert comparison.max_gap <= 1e-2

    def test_residual_at_default_settings(self):
        comparison = compare_with_exact(64, 4, trials=200, seed=1)
        assert comparison.max_residual <= 1e-6
