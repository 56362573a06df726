from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from manifoldlq.errors import DimensionMismatch, NotPositive, Singular
from manifoldlq.problem import AffineTarget, CanonicalProblem, CoeffPath, Manifold, TimeGrid, Weights

logger = logging.getLogger(__name__)

_SINGULAR_COND = 1.0 / np.finfo(float).eps
_ORIENT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class RawSystem:
    """dx = (A x + B u) ds + (C x + D u) dW with u in R^m, m > n."""

    grid: TimeGrid
    A: CoeffPath
    B: CoeffPath
    C: CoeffPath
    D: CoeffPath
    delta_D: float

    @property
    def n(self) -> int:
        return self.A.rows

    @property
    def m(self) -> int:
        return self.B.cols

    def check(self) -> None:
        self.grid.check()
        nodes = self.grid.steps + 1
        n, m = self.n, self.m
        for name, path, shape in (
            ("A", self.A, (n, n)),
            ("C", self.C, (n, n)),
            ("B", self.B, (n, m)),
            ("D", self.D, (n, m)),
        ):
            if path.nodes != nodes or (path.rows, path.cols) != shape:
                raise DimensionMismatch(f"raw_system.{name} must be {shape[0]}x{shape[1]} on {nodes} nodes")
        if not self.delta_D > 0:
            raise NotPositive(f"raw_system.delta_D must be positive, got {self.delta_D}")
        margin = check_nondegeneracy(self.D, self.delta_D)
        if margin < self.delta_D:
            raise NotPositive(f"D D^T falls below delta_D*I (min eigenvalue {margin:.6g} < {self.delta_D})")


@dataclass(frozen=True, eq=False)
class TransformResult:
    grid: TimeGrid
    M: CoeffPath
    Abar: CoeffPath
    K: CoeffPath
    L: CoeffPath
    cond_M: np.ndarray

    def canonical_problem(self, weights: Weights, manifold: Manifold, target: AffineTarget) -> CanonicalProblem:
        return CanonicalProblem(
            grid=self.grid,
            A=self.Abar,
            K=self.K,
            L=self.L,
            weights=weights,
            manifold=manifold,
            target=target,
        )


def check_nondegeneracy(D: CoeffPath, delta: float | None = None) -> float:
    """Smallest eigenvalue of D(s) D(s)^T over all nodes."""
    if D.cols <= D.rows:
        raise DimensionMismatch(f"D must have more columns than rows, got {D.rows}x{D.cols}")
    dd = D.values @ np.swapaxes(D.values, 1, 2)
    margin = float(np.min(np.linalg.eigvalsh(dd)[:, 0]))
    if delta is not None and margin < delta:
        logger.warning("nondegeneracy margin %.6g is below delta_D=%.6g", margin, delta)
    return margin


def _orient(basis: np.ndarray) -> np.ndarray:
    """Flip columns so that each one's first nonzero entry is positive."""
    out = basis.copy()
    for j in range(out.shape[1]):
        nonzero = np.flatnonzero(np.abs(out[:, j]) > _ORIENT_TOL)
        if nonzero.size and out[nonzero[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


def _m_at(d: np.ndarray, node: int) -> np.ndarray:
    n, m = d.shape
    dd = d @ d.T
    if np.linalg.cond(dd) > _SINGULAR_COND:
        raise Singular(f"D D^T is numerically singular at node {node}")
    right_inverse = linalg.solve(dd, d, assume_a="pos").T
    kernel = linalg.null_space(d)
    if kernel.shape[1] != m - n:
        raise Singular(f"kernel of D has dimension {kernel.shape[1]}, expected {m - n} at node {node}")
    return np.hstack([right_inverse, _orient(kernel)])


def build_m(D: CoeffPath) -> CoeffPath:
    """Per-node invertible M(s) with D(s) M(s) = (I, 0)."""
    if D.cols <= D.rows:
        raise DimensionMismatch(f"D must have more columns than rows, got {D.rows}x{D.cols}")
    values = D.values
    if np.all(values == values[0]):
        block = _m_at(values[0], 0)
        return CoeffPath(np.repeat(block[None], D.nodes, axis=0))
    return CoeffPath(np.stack([_m_at(values[i], i) for i in range(D.nodes)]))


def to_canonical(raw: RawSystem) -> TransformResult:
    raw.check()
    n = raw.n
    M = build_m(raw.D)
    bm = raw.B.values @ M.values
    K = bm[:, :, :n]
    L = bm[:, :, n:]
    Abar = raw.A.values - K @ raw.C.values
    cond_M = np.linalg.cond(M.values)
    if not np.all(np.isfinite(cond_M)):
        raise Singular("M(s) is not invertible at some node")
    logger.info("canonical transform: n=%d m=%d, max cond(M)=%.3g", n, raw.m, float(np.max(cond_M)))
    return TransformResult(
        grid=raw.grid,
        M=M,
        Abar=CoeffPath(Abar),
        K=CoeffPath(K),
        L=CoeffPath(L),
        cond_M=cond_M,
    )


def lift_control(
    z_path: np.ndarray,
    v_path: np.ndarray,
    xbar_path: np.ndarray,
    M: CoeffPath,
    C: CoeffPath,
) -> np.ndarray:
    """u(s) = M(s) [z(s) - C(s) xbar(s); v(s)] per path and node.

    Paths have shape (P, M+1, dim).
    """
    z = np.asarray(z_path, dtype=float)
    v = np.asarray(v_path, dtype=float)
    xbar = np.asarray(xbar_path, dtype=float)
    if z.shape != xbar.shape or z.shape[:2] != v.shape[:2]:
        raise DimensionMismatch(f"z {z.shape}, v {v.shape} and xbar {xbar.shape} must share paths and nodes")
    n = z.shape[2]
    if z.shape[1] != M.nodes or M.rows != n + v.shape[2] or (C.rows, C.cols) != (n, n) or C.nodes != M.nodes:
        raise DimensionMismatch("M and C do not match the control paths")
    head = z - np.einsum("sij,psj->psi", C.values, xbar)
    return np.einsum("sij,psj->psi", M.values, np.concatenate([head, v], axis=2))
