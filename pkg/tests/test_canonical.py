from __future__ import annotations

import unittest
from dataclasses import replace

import numpy as np

from manifoldlq.canonical import RawSystem, _orient, build_m, check_nondegeneracy, lift_control, to_canonical
from manifoldlq.errors import DimensionMismatch, NotPositive
from manifoldlq.mc_engine import euler_linear_sde, generate_noise
from manifoldlq.problem import CoeffPath, TimeGrid

from systems import sys_d


class TestBuildM(unittest.TestCase):
    def test_sys_d_basis(self) -> None:
        tr = to_canonical(sys_d(10))
        r = np.sqrt(0.5)
        np.testing.assert_allclose(tr.M[0], [[0.5, r], [0.5, -r]], atol=1e-12)
        np.testing.assert_allclose(tr.K[0], [[0.5]], atol=1e-12)
        np.testing.assert_allclose(tr.L[0], [[r]], atol=1e-12)
        np.testing.assert_allclose(tr.Abar[0], [[0.2 - 0.5 * 0.4]], atol=1e-12)

    def test_random_systems_reach_canonical_form(self) -> None:
        rng = np.random.default_rng(2024)
        g = TimeGrid(0.0, 1.0, 4)
        for _ in range(50):
            n = int(rng.integers(1, 4))
            m = n + int(rng.integers(1, 4))
            lead = np.eye(n) + 0.2 * rng.standard_normal((g.steps + 1, n, n))
            D = CoeffPath(np.concatenate([lead, rng.standard_normal((g.steps + 1, n, m - n))], axis=2))
            M = build_m(D)
            target = np.hstack([np.eye(n), np.zeros((n, m - n))])
            gap = np.max(np.abs(D.values @ M.values - target))
            self.assertLessEqual(float(gap), 1e-12)
            self.assertTrue(np.all(np.isfinite(np.linalg.cond(M.values))))

    def test_kernel_columns_lead_with_positive_entry(self) -> None:
        np.testing.assert_array_equal(_orient(np.array([[0.0, -1.0], [-2.0, 3.0]])), [[0.0, 1.0], [2.0, -3.0]])
        M = build_m(sys_d(10).D)
        for node in M.values:
            kernel = node[:, 1]
            self.assertGreater(float(kernel[np.flatnonzero(np.abs(kernel) > 1e-12)[0]]), 0.0)

    def test_time_varying_d(self) -> None:
        g = TimeGrid(0.0, 1.0, 5)
        D = CoeffPath(np.stack([[[1.0, s, 0.5]] for s in g.nodes]))
        M = build_m(D)
        np.testing.assert_allclose(D.values @ M.values, np.tile([[[1.0, 0.0, 0.0]]], (6, 1, 1)), atol=1e-12)

    def test_square_d_rejected(self) -> None:
        g = TimeGrid(0.0, 1.0, 4)
        with self.assertRaises(DimensionMismatch):
            build_m(CoeffPath.constant(np.eye(2), g))


class TestNondegeneracy(unittest.TestCase):
    def test_margin(self) -> None:
        g = TimeGrid(0.0, 1.0, 4)
        self.assertAlmostEqual(2.0, check_nondegeneracy(CoeffPath.constant([[1.0, 1.0]], g)))

    def test_warns_below_delta(self) -> None:
        g = TimeGrid(0.0, 1.0, 4)
        with self.assertLogs("manifoldlq.canonical", level="WARNING"):
            check_nondegeneracy(CoeffPath.constant([[0.1, 0.0]], g), 1.0)

    def test_raw_system_below_delta_rejected(self) -> None:
        raw = replace(sys_d(10), delta_D=5.0)
        with self.assertRaises(NotPositive):
            raw.check()


class TestRoundTrip(unittest.TestCase):
    def test_lifted_control_drives_raw_state_like_canonical_state(self) -> None:
        raw = sys_d(200)
        tr = to_canonical(raw)
        g = raw.grid
        noise = generate_noise(9, 50, g)
        z = np.broadcast_to(np.sin(g.nodes)[None, :, None], (50, g.steps + 1, 1))
        v = np.broadcast_to(np.cos(g.nodes)[None, :, None], (50, g.steps + 1, 1))
        forcing = np.einsum("sij,psj->psi", tr.K.values, z) + np.einsum("sij,psj->psi", tr.L.values, v)
        canonical = euler_linear_sde(tr.Abar, forcing, None, z, np.array([0.5]), noise).values

        u = lift_control(z, v, canonical, tr.M, raw.C)
        bu = np.einsum("sij,psj->psi", raw.B.values, u)
        du = np.einsum("sij,psj->psi", raw.D.values, u)
        lifted = euler_linear_sde(raw.A, bu, raw.C, du, np.array([0.5]), noise).values
        self.assertLessEqual(float(np.max(np.abs(lifted - canonical))), 1e-10)

    def test_lift_shapes_checked(self) -> None:
        raw = sys_d(10)
        tr = to_canonical(raw)
        with self.assertRaises(DimensionMismatch):
            lift_control(np.zeros((2, 11, 1)), np.zeros((2, 11, 1)), np.zeros((3, 11, 1)), tr.M, raw.C)


class TestRawSystem(unittest.TestCase):
    def test_dimensions(self) -> None:
        raw = sys_d(10)
        self.assertEqual((1, 2), (raw.n, raw.m))
        self.assertIsInstance(raw, RawSystem)


if __name__ == "__main__":
    unittest.main()
