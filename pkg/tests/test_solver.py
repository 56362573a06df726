from __future__ import annotations

import unittest
from dataclasses import replace

import numpy as np

from manifoldlq.errors import TargetUnreachableFromManifold
from manifoldlq.mc_engine import generate_noise
from manifoldlq.problem import SolverSettings, TimeGrid, validate_problem
from manifoldlq.riccati import solve_sigma, solve_target_odes
from manifoldlq.solver import (
    evaluate_cost,
    forward_consistency_check,
    forward_convergence_check,
    perturbation_optimality_check,
    random_directions,
    range_lemma_check,
    simulate_optimal,
    solve,
    solve_multiplier,
    stationarity_check,
    transfer_closed_form,
    transfer_problem,
)

from systems import sys_a, sys_b, sys_c, sys_e, sys_f, sys_g


def _settings(paths: int = 20, seed: int = 0) -> SolverSettings:
    return SolverSettings(mc_paths=paths, seed=seed)


class TestMultiplier(unittest.TestCase):
    def _multiplier(self, problem):
        p = validate_problem(problem)
        sig = solve_sigma(p)
        return solve_multiplier(sig, solve_target_odes(sig, p.target, p), p)

    def test_closed_form_values(self) -> None:
        self.assertAlmostEqual(0.7, float(self._multiplier(sys_a(100)).lambda_star[0]), delta=1e-12)
        self.assertAlmostEqual(0.4, float(self._multiplier(sys_e(100)).lambda_star[0]), delta=1e-12)
        self.assertEqual(0.0, float(self._multiplier(sys_c(100)).lambda_star[0]))
        np.testing.assert_allclose(self._multiplier(sys_f(100)).lambda_star, [1.0], atol=1e-12)

    def test_sys_e_matrix(self) -> None:
        mult = self._multiplier(sys_e(100))
        np.testing.assert_allclose(mult.s_matrix, [[0.5]], atol=1e-12)
        np.testing.assert_allclose(mult.rhs, [0.2], atol=1e-12)
        self.assertTrue(mult.solvable)

    def test_unreachable_carries_result(self) -> None:
        with self.assertRaises(TargetUnreachableFromManifold) as ctx:
            self._multiplier(sys_g(100))
        result = ctx.exception.result
        self.assertGreaterEqual(result.residual, 0.5)
        self.assertFalse(result.solvable)
        np.testing.assert_allclose(result.lambda_star, [1.0, 0.0], atol=1e-12)


class TestOptimalPair(unittest.TestCase):
    def test_sys_a_trajectory(self) -> None:
        sol = solve(sys_a(2000), _settings(100))
        ens = sol.ensemble
        np.testing.assert_allclose(ens.y[:, :, 0], 0.7, atol=1e-12)
        np.testing.assert_allclose(ens.v[:, :, 0], 0.7, atol=1e-12)
        np.testing.assert_allclose(ens.z[:, :, 0], 0.0, atol=1e-12)
        self.assertAlmostEqual(0.3, float(ens.x[0, 0, 0]), delta=1e-10)
        self.assertAlmostEqual(1.0, float(ens.x[0, -1, 0]), delta=1e-10)
        np.testing.assert_allclose(ens.x[0, :, 0], 1.0 - 0.7 * (1.0 - sol.problem.grid.nodes), atol=1e-10)

    def test_sys_a_cost(self) -> None:
        sol = solve(sys_a(2000), _settings(100))
        self.assertAlmostEqual(0.49, sol.cost.j_hat, delta=1e-4)
        self.assertLessEqual(sol.cost.se, 1e-14)
        self.assertAlmostEqual(0.91, sol.cost.lagrangian_j_hat, delta=1e-4)
        self.assertEqual({"terminal", "state", "diffusion", "drift"}, set(sol.cost.breakdown))
        self.assertEqual(sol.cost.j_hat, evaluate_cost(sol.ensemble, sol.problem).j_hat)

    def test_sys_c_follows_brownian_path(self) -> None:
        sol = solve(sys_c(200), _settings(30))
        ens = sol.ensemble
        np.testing.assert_allclose(ens.x[:, :, 0], sol.noise.w, atol=1e-12)
        np.testing.assert_allclose(ens.z[:, :, 0], 1.0, atol=1e-12)
        np.testing.assert_allclose(ens.y, 0.0, atol=1e-14)
        self.assertAlmostEqual(0.0, sol.cost.j_hat, delta=1e-14)

    def test_sys_f_partial_manifold(self) -> None:
        sol = solve(sys_f(200), _settings(10))
        ens = sol.ensemble
        nodes = sol.problem.grid.nodes
        np.testing.assert_allclose(ens.y[0], np.tile([1.0, 0.0], (201, 1)), atol=1e-12)
        np.testing.assert_allclose(ens.x[0, :, 0], nodes, atol=1e-10)
        np.testing.assert_allclose(ens.x[0, :, 1], 1.0, atol=1e-10)
        self.assertAlmostEqual(1.0, sol.cost.j_hat, delta=1e-4)

    def test_terminal_constraint_is_exact(self) -> None:
        for problem in (sys_a(100), sys_b(100), sys_c(100), sys_e(100), sys_f(100)):
            sol = solve(problem, _settings(40, seed=3))
            eta = sol.problem.target.realize(sol.noise.w[:, -1])
            self.assertLessEqual(float(np.max(np.abs(sol.ensemble.x[:, -1] - eta))), 1e-12)
            gap = sol.ensemble.x[:, 0] @ sol.problem.manifold.F.T - sol.problem.manifold.b
            self.assertLessEqual(float(np.max(np.abs(gap))), 1e-10)

    def test_multiplier_does_not_move_pinned_trajectory(self) -> None:
        a = solve(sys_a(100), _settings(5))
        e = solve(sys_e(100), _settings(5))
        np.testing.assert_allclose(a.ensemble.x, e.ensemble.x, atol=1e-10)
        np.testing.assert_allclose(a.ensemble.v, e.ensemble.v, atol=1e-10)
        self.assertNotAlmostEqual(float(a.multiplier.lambda_star[0]), float(e.multiplier.lambda_star[0]))

    def test_results_independent_of_workers(self) -> None:
        one = solve(sys_b(50), SolverSettings(mc_paths=600, seed=4, workers=1))
        many = solve(sys_b(50), SolverSettings(mc_paths=600, seed=4, workers=3))
        np.testing.assert_array_equal(one.ensemble.x, many.ensemble.x)
        self.assertEqual(one.cost.j_hat, many.cost.j_hat)


class TestConsistencyChecks(unittest.TestCase):
    def test_forward_consistency_exact_cases(self) -> None:
        for problem in (sys_a(100), sys_c(100)):
            sol = solve(problem, _settings(20))
            self.assertLessEqual(forward_consistency_check(sol.ensemble, sol.problem, sol.noise), 1e-12)

    def test_forward_consistency_converges(self) -> None:
        fine = TimeGrid(0.0, 1.0, 2**9)
        noise = generate_noise(17, 200, fine)
        devs = []
        for factor in (8, 4, 2, 1):
            coarse = noise.coarsen(factor)
            p = validate_problem(sys_b(coarse.grid.steps))
            sig = solve_sigma(p)
            phi = solve_target_odes(sig, p.target, p)
            ens = simulate_optimal(solve_multiplier(sig, phi, p), sig, phi, p, coarse)
            devs.append(forward_consistency_check(ens, p, coarse))
        for coarser, finer in zip(devs, devs[1:]):
            self.assertGreater(coarser, finer)

    def test_forward_convergence_check_rows(self) -> None:
        p = validate_problem(sys_b(128))
        noise = generate_noise(17, 200, p.grid)
        rows = forward_convergence_check(p, noise)
        self.assertEqual([8, 4, 2, 1], [f for f, _ in rows])
        devs = [d for _, d in rows]
        for coarser, finer in zip(devs, devs[1:]):
            self.assertGreater(coarser, finer)
        rows = forward_convergence_check(p, noise, fine_deviation=0.125)
        self.assertEqual((1, 0.125), rows[-1])

    def test_forward_convergence_skips_unusable_factors(self) -> None:
        p = validate_problem(sys_a(6))
        rows = forward_convergence_check(p, generate_noise(0, 3, p.grid))
        self.assertEqual([2, 1], [f for f, _ in rows])
        for _, dev in rows:
            self.assertLessEqual(dev, 1e-12)

    def test_stationarity(self) -> None:
        for problem in (sys_a(100), sys_b(100), sys_c(100), sys_e(100), sys_f(100)):
            sol = solve(problem, _settings(20, seed=1))
            r1, r2 = stationarity_check(sol.ensemble, sol.multiplier, sol.problem)
            self.assertLessEqual(r1, 1e-14)
            self.assertLessEqual(r2, 1e-10)


class TestPerturbation(unittest.TestCase):
    def test_sys_a_constant_direction(self) -> None:
        sol = solve(sys_a(200), _settings(10))
        w = np.ones((201, 1))
        (row,) = perturbation_optimality_check(
            sol.multiplier, sol.sigma, sol.phi, sol.problem, sol.noise, [w], 0.1, ensemble=sol.ensemble
        )
        self.assertAlmostEqual(0.01, row.delta_j, delta=1e-4)
        self.assertLessEqual(abs(row.linear_term), 1e-6)
        self.assertTrue(row.ok)

    def test_wrong_multiplier_is_rejected(self) -> None:
        sol = solve(sys_a(200), _settings(10))
        wrong = replace(sol.multiplier, lambda_star=np.array([0.5]))
        (row,) = perturbation_optimality_check(
            wrong, sol.sigma, sol.phi, sol.problem, sol.noise, [np.ones((201, 1))], 0.1, ensemble=sol.ensemble
        )
        self.assertGreater(row.delta_j, 0.0)
        self.assertAlmostEqual(0.4, row.linear_term, delta=1e-6)
        self.assertFalse(row.ok)

    def test_sys_e_random_directions(self) -> None:
        sol = solve(sys_e(100), SolverSettings(mc_paths=10000, seed=5))
        directions = random_directions(20, sol.problem.grid, 1, seed=5)
        rows = perturbation_optimality_check(
            sol.multiplier, sol.sigma, sol.phi, sol.problem, sol.noise, directions, 0.05, ensemble=sol.ensemble
        )
        self.assertEqual(20, len(rows))
        for row in rows:
            self.assertGreaterEqual(row.delta_j, -4.0 * row.se - 1e-12)

    def test_noisy_problem_directions(self) -> None:
        sol = solve(sys_b(100), SolverSettings(mc_paths=2000, seed=6))
        rows = perturbation_optimality_check(
            sol.multiplier,
            sol.sigma,
            sol.phi,
            sol.problem,
            sol.noise,
            random_directions(6, sol.problem.grid, 1, seed=6),
            0.05,
            ensemble=sol.ensemble,
        )
        self.assertTrue(all(row.ok for row in rows))

    def test_directions_are_seeded(self) -> None:
        g = TimeGrid(0.0, 1.0, 50)
        first = random_directions(4, g, 2, seed=9)
        second = random_directions(4, g, 2, seed=9)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
            self.assertEqual((51, 2), a.shape)


class TestRangeLemma(unittest.TestCase):
    def test_random_cases_stay_consistent(self) -> None:
        for n, k in ((1, 1), (3, 2), (4, 4)):
            self.assertLessEqual(range_lemma_check(n, k, 100, seed=n), 1e-8)


class TestTransfer(unittest.TestCase):
    def test_scalar_closed_form(self) -> None:
        problem = transfer_problem(sys_a(2000), np.array([0.3]))
        self.assertAlmostEqual(0.49, transfer_closed_form(problem), places=12)
        sol = solve(problem, _settings(5))
        self.assertAlmostEqual(0.49, sol.cost.j_hat, delta=1e-4)

    def test_closed_form_needs_scalar_drift_free_data(self) -> None:
        self.assertIsNone(transfer_closed_form(transfer_problem(sys_b(10), np.array([0.0]))))
        self.assertIsNone(transfer_closed_form(transfer_problem(sys_f(10), np.zeros(2))))


if __name__ == "__main__":
    unittest.main()
