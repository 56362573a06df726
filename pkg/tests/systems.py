"""Closed-form benchmark systems shared by the test modules."""

from __future__ import annotations

import numpy as np

from manifoldlq.canonical import RawSystem
from manifoldlq.problem import (
    AffineTarget,
    CanonicalProblem,
    CoeffPath,
    Manifold,
    TimeGrid,
    Weights,
)


def grid(steps: int = 200, t_end: float = 1.0) -> TimeGrid:
    return TimeGrid(0.0, t_end, steps)


def scalar_problem(
    steps: int = 200,
    *,
    t_end: float = 1.0,
    K: float = 0.0,
    G: float = 0.0,
    b: float = 0.3,
    c0: float = 1.0,
    c1: float = 0.0,
) -> CanonicalProblem:
    """n = 1, m = 2 with A = Q = R = 0, L = N = 1, F = 1."""
    g = grid(steps, t_end)
    return CanonicalProblem(
        grid=g,
        A=CoeffPath.zeros(1, 1, g),
        K=CoeffPath.constant([[K]], g),
        L=CoeffPath.constant([[1.0]], g),
        weights=Weights(
            G=np.array([[G]]),
            Q=CoeffPath.zeros(1, 1, g),
            R=CoeffPath.zeros(1, 1, g),
            N=CoeffPath.constant([[1.0]], g),
            delta=1.0,
        ),
        manifold=Manifold(F=np.array([[1.0]]), b=np.array([b])),
        target=AffineTarget(c0=np.array([c0]), c1=np.array([c1])),
    )


def sys_a(steps: int = 200) -> CanonicalProblem:
    return scalar_problem(steps)


def sys_b(steps: int = 200) -> CanonicalProblem:
    return scalar_problem(steps, K=1.0)


def sys_c(steps: int = 200) -> CanonicalProblem:
    return scalar_problem(steps, b=0.0, c0=0.0, c1=1.0)


def sys_e(steps: int = 200) -> CanonicalProblem:
    return scalar_problem(steps, G=1.0)


def planar_problem(L: np.ndarray, F: np.ndarray, b: np.ndarray, steps: int = 200) -> CanonicalProblem:
    """n = 2 with A = K = Q = R = G = 0, N = I and target (1, 1)."""
    g = grid(steps)
    L = np.asarray(L, dtype=float)
    mn = L.shape[1]
    return CanonicalProblem(
        grid=g,
        A=CoeffPath.zeros(2, 2, g),
        K=CoeffPath.zeros(2, 2, g),
        L=CoeffPath.constant(L, g),
        weights=Weights(
            G=np.zeros((2, 2)),
            Q=CoeffPath.zeros(2, 2, g),
            R=CoeffPath.zeros(2, 2, g),
            N=CoeffPath.constant(np.eye(mn), g),
            delta=1.0,
        ),
        manifold=Manifold(F=np.asarray(F, dtype=float), b=np.asarray(b, dtype=float)),
        target=AffineTarget(c0=np.array([1.0, 1.0]), c1=np.zeros(2)),
    )


def sys_f(steps: int = 200) -> CanonicalProblem:
    return planar_problem(np.eye(2), [[1.0, 0.0]], [0.0], steps)


def sys_g(steps: int = 200) -> CanonicalProblem:
    return planar_problem([[1.0], [0.0]], np.eye(2), [0.0, 0.0], steps)


def sys_d(steps: int = 200, a: float = 0.2, c: float = 0.4) -> RawSystem:
    """n = 1, m = 2 raw system with B = (1, 0) and D = (1, 1)."""
    g = grid(steps)
    return RawSystem(
        grid=g,
        A=CoeffPath.constant([[a]], g),
        B=CoeffPath.constant([[1.0, 0.0]], g),
        C=CoeffPath.constant([[c]], g),
        D=CoeffPath.constant([[1.0, 1.0]], g),
        delta_D=1e-8,
    )
