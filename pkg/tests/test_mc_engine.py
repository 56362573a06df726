from __future__ import annotations

import unittest

import numpy as np
from scipy import linalg

from manifoldlq.errors import DimensionMismatch, Singular
from manifoldlq.mc_engine import (
    PATH_CHUNK,
    estimate_gramian,
    euler_linear_sde,
    fundamental_matrix,
    generate_noise,
    mean_and_se,
    path_chunks,
    represent_terminal_expectation,
)
from manifoldlq.problem import AffineTarget, CoeffPath, TimeGrid

from systems import grid


class TestNoise(unittest.TestCase):
    def test_chunks_cover_paths_in_order(self) -> None:
        chunks = path_chunks(2 * PATH_CHUNK + 3)
        self.assertEqual((0, PATH_CHUNK), chunks[0])
        self.assertEqual((2 * PATH_CHUNK, 2 * PATH_CHUNK + 3), chunks[-1])

    def test_independent_of_worker_count(self) -> None:
        g = grid(50)
        one = generate_noise(7, 600, g, workers=1)
        many = generate_noise(7, 600, g, workers=4)
        np.testing.assert_array_equal(one.increments, many.increments)

    def test_path_streams_are_prefix_stable(self) -> None:
        g = grid(50)
        small = generate_noise(7, 10, g)
        large = generate_noise(7, 300, g)
        np.testing.assert_array_equal(small.increments, large.increments[:10])

    def test_seed_changes_noise(self) -> None:
        g = grid(20)
        self.assertFalse(np.array_equal(generate_noise(1, 5, g).increments, generate_noise(2, 5, g).increments))

    def test_brownian_paths_start_at_zero(self) -> None:
        noise = generate_noise(0, 4, grid(20))
        self.assertEqual((4, 21), noise.w.shape)
        np.testing.assert_array_equal(np.zeros(4), noise.w[:, 0])

    def test_increment_variance(self) -> None:
        g = grid(10)
        noise = generate_noise(3, 20000, g)
        self.assertAlmostEqual(g.h, float(np.var(noise.increments)), delta=0.05 * g.h)

    def test_increment_mean(self) -> None:
        g = grid(50)
        noise = generate_noise(4, 2000, g)
        bound = 4.0 * np.sqrt(g.h / (noise.paths * g.steps))
        self.assertLessEqual(abs(float(np.mean(noise.increments))), bound)

    def test_coarsen_keeps_paths(self) -> None:
        noise = generate_noise(5, 8, grid(40))
        coarse = noise.coarsen(4)
        self.assertEqual(10, coarse.grid.steps)
        np.testing.assert_allclose(coarse.w, noise.w[:, ::4], atol=1e-13)


class TestMeanAndSe(unittest.TestCase):
    def test_single_sample_has_zero_se(self) -> None:
        mean, se = mean_and_se(np.array([[2.0, 3.0]]))
        np.testing.assert_array_equal([2.0, 3.0], mean)
        np.testing.assert_array_equal([0.0, 0.0], se)

    def test_sample_standard_error(self) -> None:
        mean, se = mean_and_se(np.array([1.0, 3.0]))
        self.assertEqual(2.0, float(mean))
        self.assertAlmostEqual(1.0, float(se))


class TestEuler(unittest.TestCase):
    def test_pure_noise_reproduces_brownian_path(self) -> None:
        noise = generate_noise(11, 20, grid(100))
        paths = euler_linear_sde(None, None, None, np.ones((101, 1)), np.zeros(1), noise)
        np.testing.assert_allclose(paths.values[:, :, 0], noise.w, atol=1e-12)

    def test_geometric_mean_is_one(self) -> None:
        g = grid(100)
        noise = generate_noise(13, 4000, g)
        paths = euler_linear_sde(None, None, CoeffPath.constant([[1.0]], g), None, np.ones(1), noise)
        mean, se = mean_and_se(paths.terminal[:, 0])
        self.assertLessEqual(abs(float(mean) - 1.0), 4.0 * float(se))

    def test_strong_error_shrinks_with_step(self) -> None:
        fine = generate_noise(17, 2000, grid(512))
        exact = np.exp(fine.w[:, -1] - 0.5)
        errors = []
        for factor in (8, 4, 2, 1):
            noise = fine.coarsen(factor)
            paths = euler_linear_sde(None, None, CoeffPath.constant([[1.0]], noise.grid), None, np.ones(1), noise)
            errors.append(float(np.mean(np.abs(paths.terminal[:, 0] - exact))))
        for coarse, finer in zip(errors, errors[1:]):
            self.assertGreater(coarse, finer)
        # strong order one half: an 8x smaller step cuts the error by about sqrt(8)
        self.assertGreaterEqual(errors[0] / errors[-1], 2.0)

    def test_shape_checked(self) -> None:
        g = grid(10)
        noise = generate_noise(0, 2, g)
        with self.assertRaises(DimensionMismatch):
            euler_linear_sde(CoeffPath.zeros(2, 2, g), None, None, None, np.zeros(1), noise)


class TestFundamental(unittest.TestCase):
    def test_deterministic_decay_and_relative(self) -> None:
        g = TimeGrid(0.0, 1.0, 10)
        noise = generate_noise(0, 3, g)
        fm = fundamental_matrix("Phi", CoeffPath.constant([[2.0]], g), CoeffPath.zeros(1, 1, g), noise)
        expected = (1.0 - 2.0 * g.h) ** np.arange(11)
        np.testing.assert_allclose(fm.values[0, :, 0, 0], expected, rtol=1e-12)
        rel = fm.relative(4)
        np.testing.assert_allclose(rel[:, 0, 0, 0], 1.0)
        np.testing.assert_allclose(rel[0, :, 0, 0], expected[:7], rtol=1e-12)

    def test_constant_drift_matches_matrix_exponential(self) -> None:
        g = grid(2000)
        a = np.array([[0.3, 1.0], [-1.0, 0.2]])
        fm = fundamental_matrix("Gamma", CoeffPath.constant(a, g), CoeffPath.zeros(2, 2, g), generate_noise(0, 2, g))
        for i in (0, 500, 1000, 2000):
            np.testing.assert_allclose(fm.values[1, i], linalg.expm(-a * g.nodes[i]), atol=1e-3)

    def test_multiplicative_pi_strong_error(self) -> None:
        g = grid(800)
        noise = generate_noise(9, 2000, g)
        exact = np.exp(-noise.w - 0.5 * g.nodes)
        errors = []
        for n in (noise.coarsen(8), noise):
            fm = fundamental_matrix("Pi", CoeffPath.zeros(1, 1, n.grid), CoeffPath.constant([[1.0]], n.grid), n)
            errors.append(float(np.mean(np.abs(fm.values[:, -1, 0, 0] - exact[:, -1]))))
        self.assertGreater(errors[0], errors[1])
        self.assertLessEqual(errors[1], 0.1)

    def test_singular_start_reports_path(self) -> None:
        g = TimeGrid(0.0, 1.0, 10)
        noise = generate_noise(0, 2, g)
        fm = fundamental_matrix("Pi", CoeffPath.constant([[10.0]], g), CoeffPath.zeros(1, 1, g), noise)
        with self.assertRaises(Singular) as ctx:
            fm.relative(1)
        self.assertEqual(0, ctx.exception.path)

    def test_unknown_kind(self) -> None:
        g = grid(10)
        with self.assertRaises(ValueError):
            fundamental_matrix("Psi", CoeffPath.zeros(1, 1, g), CoeffPath.zeros(1, 1, g), generate_noise(0, 1, g))


class TestGramian(unittest.TestCase):
    def test_deterministic_gramian_is_exact(self) -> None:
        g = grid(100)
        noise = generate_noise(0, 300, g)
        est = estimate_gramian(0.0, 1.0, CoeffPath.zeros(1, 1, g), CoeffPath.zeros(1, 1, g), CoeffPath.constant([[1.0, 0.0]], g), noise)
        self.assertAlmostEqual(1.0, float(est.psi_hat[0, 0]), delta=1e-12)
        self.assertLessEqual(float(est.se[0, 0]), 1e-14)

    def test_multiplicative_noise_gramian(self) -> None:
        g = grid(200)
        noise = generate_noise(21, 10000, g)
        est = estimate_gramian(0.0, 1.0, CoeffPath.zeros(1, 1, g), CoeffPath.constant([[1.0]], g), CoeffPath.constant([[1.0]], g), noise)
        discrete = (1.0 + g.h) ** g.steps - 1.0
        self.assertLessEqual(abs(float(est.psi_hat[0, 0]) - discrete), 4.0 * float(est.se[0, 0]))
        self.assertLess(float(est.max_z_score(np.array([[discrete]]))), 4.0)

    def test_zero_se_scores(self) -> None:
        g = grid(10)
        noise = generate_noise(0, 5, g)
        est = estimate_gramian(0.0, 1.0, CoeffPath.zeros(1, 1, g), CoeffPath.zeros(1, 1, g), CoeffPath.constant([[1.0]], g), noise)
        self.assertEqual(0.0, est.max_z_score(np.array([[1.0]])))
        self.assertEqual(float("inf"), est.max_z_score(np.array([[2.0]])))

    def test_interval_must_be_ordered(self) -> None:
        g = grid(10)
        noise = generate_noise(0, 2, g)
        zero = CoeffPath.zeros(1, 1, g)
        with self.assertRaises(DimensionMismatch):
            estimate_gramian(0.5, 0.5, zero, zero, CoeffPath.constant([[1.0]], g), noise)


class TestTerminalRepresentation(unittest.TestCase):
    def test_constant_target_and_driver(self) -> None:
        g = grid(100)
        noise = generate_noise(0, 50, g)
        zero = CoeffPath.zeros(1, 1, g)
        target = AffineTarget(c0=np.array([2.0]), c1=np.array([0.0]))
        mean, se = represent_terminal_expectation(target, None, zero, zero, noise)
        self.assertAlmostEqual(2.0, float(mean[0]), delta=1e-14)
        mean, se = represent_terminal_expectation(target, np.ones((101, 1)), zero, zero, noise)
        self.assertAlmostEqual(1.0, float(mean[0]), delta=1e-12)
        self.assertLessEqual(float(se[0]), 1e-14)

    def test_noise_target_has_zero_mean(self) -> None:
        g = grid(50)
        noise = generate_noise(4, 10000, g)
        zero = CoeffPath.zeros(1, 1, g)
        target = AffineTarget(c0=np.array([0.0]), c1=np.array([1.0]))
        mean, se = represent_terminal_expectation(target, None, zero, zero, noise)
        self.assertLessEqual(abs(float(mean[0])), 4.0 * float(se[0]))


if __name__ == "__main__":
    unittest.main()
