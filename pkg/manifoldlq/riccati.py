"""Backward integration of the Riccati-type equation and of the affine BSDE coefficients.

Sigma solves

    Sigma' = Sigma A^T + A Sigma + Sigma Q Sigma - L N^{-1} L^T - K (I + Sigma R)^{-1} Sigma K^T,
    Sigma(T) = 0,

and for a target eta = c0 + c1 W(T) the BSDE solution is phi = a + bc W, beta = bc with

    bc' = (A + Sigma Q) bc,                            bc(T) = -c1,
    a'  = (A + Sigma Q) a + K (I + Sigma R)^{-1} bc,   a(T)  = -c0.

Both sweeps use the same fixed-step classical RK4 scheme; coefficients are frozen at the
left node of each interval.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from manifoldlq.errors import NumericalFailure
from manifoldlq.linalg import clip_psd, min_eig, symmetrize
from manifoldlq.problem import AffineTarget, SolverSettings, TimeGrid, ValidatedProblem

logger = logging.getLogger(__name__)

_SINGULAR_COND = 1.0 / np.finfo(float).eps


@dataclass(frozen=True)
class _NodeCoeffs:
    A: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    LNL: np.ndarray


def _constant_terms(p: ValidatedProblem) -> np.ndarray:
    """L N^{-1} L^T at every node."""
    L = p.L.values
    ninv_lt = np.linalg.solve(p.weights.N.values, np.swapaxes(L, 1, 2))
    return symmetrize(L @ ninv_lt)


def _node(p: ValidatedProblem, lnl: np.ndarray, i: int) -> _NodeCoeffs:
    w = p.weights
    return _NodeCoeffs(A=p.A[i], K=p.K[i], Q=w.Q[i], R=w.R[i], LNL=lnl[i])


def _plus_sigma_r_solve(sig: np.ndarray, R: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(np.eye(sig.shape[0]) + sig @ R, rhs)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(f"I + Sigma R became singular: {e}") from e


def _riccati_rhs(sig: np.ndarray, c: _NodeCoeffs) -> np.ndarray:
    gain = _plus_sigma_r_solve(sig, c.R, sig)
    return sig @ c.A.T + c.A @ sig + sig @ c.Q @ sig - c.LNL - c.K @ gain @ c.K.T


def _target_rhs(sig: np.ndarray, c: _NodeCoeffs, a: np.ndarray, bc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ahat = c.A + sig @ c.Q
    return ahat @ a + c.K @ _plus_sigma_r_solve(sig, c.R, bc), ahat @ bc


def _settle(sig: np.ndarray, *, psd_tol: float, node: int, warn: bool) -> np.ndarray:
    sig = symmetrize(sig)
    if not np.all(np.isfinite(sig)):
        raise NumericalFailure(f"Sigma is not finite at node {node}")
    low = min_eig(sig)
    if low < psd_tol:
        raise NumericalFailure(f"Sigma lost positive semidefiniteness at node {node} (min eigenvalue {low:.3e})")
    if low < 0.0:
        if warn:
            logger.warning("clipping Sigma eigenvalue %.3e to 0 at node %d", low, node)
        sig = clip_psd(sig)
    return sig


def _sigma_stages(sig: np.ndarray, c: _NodeCoeffs, dt: float) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
    k1 = _riccati_rhs(sig, c)
    s2 = sig + 0.5 * dt * k1
    k2 = _riccati_rhs(s2, c)
    s3 = sig + 0.5 * dt * k2
    k3 = _riccati_rhs(s3, c)
    s4 = sig + dt * k3
    k4 = _riccati_rhs(s4, c)
    return (sig, s2, s3, s4), sig + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True, eq=False)
class SigmaPath:
    grid: TimeGrid
    values: np.ndarray
    substeps: int
    psd_tol: float
    plus_sigma_r: tuple
    plus_r_sigma: tuple

    @property
    def n(self) -> int:
        return int(self.values.shape[1])

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]

    def solve_plus_sigma_r(self, i: int, rhs: np.ndarray, *, trans: int = 0) -> np.ndarray:
        """(I + Sigma R)^{-1} rhs at node i (transposed system when trans=1)."""
        return linalg.lu_solve(self.plus_sigma_r[i], rhs, trans=trans)

    def solve_plus_r_sigma(self, i: int, rhs: np.ndarray) -> np.ndarray:
        return linalg.lu_solve(self.plus_r_sigma[i], rhs)

    def min_eigs(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.values)[:, 0]


@dataclass(frozen=True, eq=False)
class PhiCoeffs:
    """phi(s) = a(s) + bc(s) W(s) and beta(s) = bc(s)."""

    a: np.ndarray
    bc: np.ndarray

    def phi(self, i: int, w: np.ndarray | float) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        return self.a[i] + self.bc[i] * w[..., None]

    def beta(self, i: int) -> np.ndarray:
        return self.bc[i]


def _factor(mat: np.ndarray, *, node: int, name: str) -> tuple:
    if np.linalg.cond(mat) > _SINGULAR_COND:
        raise NumericalFailure(f"{name} is numerically singular at node {node}")
    return linalg.lu_factor(mat)


def solve_sigma(p: ValidatedProblem, settings: SolverSettings | None = None) -> SigmaPath:
    settings = settings or SolverSettings()
    grid = p.grid
    n = p.n
    sub = int(settings.ode_substeps)
    dt = -grid.h / sub
    lnl = _constant_terms(p)

    values = np.zeros((grid.steps + 1, n, n))
    sig = np.zeros((n, n))
    for i in range(grid.steps - 1, -1, -1):
        c = _node(p, lnl, i)
        for _ in range(sub):
            _, sig = _sigma_stages(sig, c, dt)
            sig = _settle(sig, psd_tol=settings.psd_tol, node=i, warn=True)
        values[i] = sig
    values.setflags(write=False)

    eye = np.eye(n)
    R = p.weights.R.values
    plus_sigma_r = tuple(_factor(eye + values[i] @ R[i], node=i, name="I + Sigma R") for i in range(grid.steps + 1))
    plus_r_sigma = tuple(_factor(eye + R[i] @ values[i], node=i, name="I + R Sigma") for i in range(grid.steps + 1))
    logger.info("solved Riccati equation on %d steps (substeps=%d), Sigma(t) min eig %.6g", grid.steps, sub, min_eig(values[0]))
    return SigmaPath(
        grid=grid,
        values=values,
        substeps=sub,
        psd_tol=float(settings.psd_tol),
        plus_sigma_r=plus_sigma_r,
        plus_r_sigma=plus_r_sigma,
    )


def riccati_residual(sig: SigmaPath, p: ValidatedProblem) -> float:
    """Max-norm central-difference residual of the Riccati equation over interior nodes.

    The right-hand side at s_i averages the coefficients of the two adjacent intervals,
    which is the plain right-hand side when coefficients are constant.
    """
    grid = p.grid
    lnl = _constant_terms(p)
    worst = 0.0
    for i in range(1, grid.steps):
        derivative = (sig[i + 1] - sig[i - 1]) / (2.0 * grid.h)
        rhs = 0.5 * (_riccati_rhs(sig[i], _node(p, lnl, i)) + _riccati_rhs(sig[i], _node(p, lnl, i - 1)))
        gap = derivative - rhs
        worst = max(worst, float(np.max(np.abs(gap))))
    return worst


def solve_target_odes(sig: SigmaPath, target: AffineTarget, p: ValidatedProblem) -> PhiCoeffs:
    grid = p.grid
    sub = sig.substeps
    dt = -grid.h / sub
    lnl = _constant_terms(p)

    a = np.zeros((grid.steps + 1, p.n))
    bc = np.zeros((grid.steps + 1, p.n))
    a[-1] = -target.c0
    bc[-1] = -target.c1
    for i in range(grid.steps - 1, -1, -1):
        c = _node(p, lnl, i)
        s = np.array(sig[i + 1])
        ya, yb = a[i + 1], bc[i + 1]
        for _ in range(sub):
            (s1, s2, s3, s4), s_next = _sigma_stages(s, c, dt)
            ka1, kb1 = _target_rhs(s1, c, ya, yb)
            ka2, kb2 = _target_rhs(s2, c, ya + 0.5 * dt * ka1, yb + 0.5 * dt * kb1)
            ka3, kb3 = _target_rhs(s3, c, ya + 0.5 * dt * ka2, yb + 0.5 * dt * kb2)
            ka4, kb4 = _target_rhs(s4, c, ya + dt * ka3, yb + dt * kb3)
            ya = ya + (dt / 6.0) * (ka1 + 2.0 * ka2 + 2.0 * ka3 + ka4)
            yb = yb + (dt / 6.0) * (kb1 + 2.0 * kb2 + 2.0 * kb3 + kb4)
            s = _settle(s_next, psd_tol=sig.psd_tol, node=i, warn=False)
        if not (np.all(np.isfinite(ya)) and np.all(np.isfinite(yb))):
            raise NumericalFailure(f"BSDE coefficients are not finite at node {i}")
        a[i], bc[i] = ya, yb
    a.setflags(write=False)
    bc.setflags(write=False)
    return PhiCoeffs(a=a, bc=bc)
