from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Any

import numpy as np

from manifoldlq.errors import BadGrid, DimensionMismatch, NotPositive, ValidationError
from manifoldlq.linalg import asymmetry, symmetrize

logger = logging.getLogger(__name__)


def _frozen_array(x: Any, *, ndim: int, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_start = s_0 < s_1 < ... < s_M = t_end."""

    t_start: float
    t_end: float
    steps: int

    @property
    def h(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t_start + np.arange(self.steps + 1) * self.h

    @property
    def horizon(self) -> float:
        return self.t_end - self.t_start

    def check(self) -> None:
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise BadGrid("grid endpoints must be finite")
        if not self.t_start < self.t_end:
            raise BadGrid(f"grid requires t_start < t_end, got [{self.t_start}, {self.t_end}]")
        if int(self.steps) != self.steps or self.steps < 2:
            raise BadGrid(f"grid requires at least 2 steps, got {self.steps}")

    def index_of(self, t: float) -> int:
        i = int(round((float(t) - self.t_start) / self.h))
        if i < 0 or i > self.steps or abs(self.t_start + i * self.h - float(t)) > 1e-9 * max(1.0, abs(self.t_end)):
            raise BadGrid(f"time {t} is not a grid node of [{self.t_start}, {self.t_end}] with {self.steps} steps")
        return i

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.steps * int(factor))

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.steps % int(factor):
            raise BadGrid(f"cannot coarsen {self.steps} steps by {factor}")
        return TimeGrid(self.t_start, self.t_end, self.steps // int(factor))


@dataclass(frozen=True, eq=False)
class CoeffPath:
    """Piecewise-constant matrix coefficient: values[i] holds on [s_i, s_{i+1})."""

    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_array(self.values, ndim=3, name="coefficient path"))
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("coefficient path has non-finite entries")

    @staticmethod
    def constant(matrix: Any, grid: TimeGrid) -> "CoeffPath":
        mat = np.atleast_2d(np.array(matrix, dtype=float))
        return CoeffPath(np.repeat(mat[None, :, :], grid.steps + 1, axis=0))

    @staticmethod
    def zeros(rows: int, cols: int, grid: TimeGrid) -> "CoeffPath":
        return CoeffPath(np.zeros((grid.steps + 1, rows, cols)))

    @property
    def nodes(self) -> int:
        return int(self.values.shape[0])

    @property
    def rows(self) -> int:
        return int(self.values.shape[1])

    @property
    def cols(self) -> int:
        return int(self.values.shape[2])

    def __getitem__(self, i: int) -> np.ndarray:
        return self.values[i]

    def transpose(self) -> "CoeffPath":
        return CoeffPath(np.swapaxes(self.values, 1, 2))

    def every(self, factor: int) -> "CoeffPath":
        return CoeffPath(self.values[:: int(factor)])


@dataclass(frozen=True, eq=False)
class Weights:
    G: np.ndarray
    Q: CoeffPath
    R: CoeffPath
    N: CoeffPath
    delta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "G", _frozen_array(np.atleast_2d(self.G), ndim=2, name="weights.G"))


@dataclass(frozen=True, eq=False)
class Manifold:
    """The affine set {x : F x = b} of admissible initial states."""

    F: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "F", _frozen_array(np.atleast_2d(self.F), ndim=2, name="manifold.F"))
        object.__setattr__(self, "b", _frozen_array(np.atleast_1d(self.b), ndim=1, name="manifold.b"))

    @property
    def k(self) -> int:
        return int(self.F.shape[0])


@dataclass(frozen=True, eq=False)
class AffineTarget:
    """Terminal state eta = c0 + c1 * W(T)."""

    c0: np.ndarray
    c1: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "c0", _frozen_array(np.atleast_1d(self.c0), ndim=1, name="target.c0"))
        object.__setattr__(self, "c1", _frozen_array(np.atleast_1d(self.c1), ndim=1, name="target.c1"))

    def realize(self, w_end: np.ndarray) -> np.ndarray:
        w = np.asarray(w_end, dtype=float)
        return self.c0 + self.c1 * w[..., None]


@dataclass(frozen=True, eq=False)
class CanonicalProblem:
    grid: TimeGrid
    A: CoeffPath
    K: CoeffPath
    L: CoeffPath
    weights: Weights
    manifold: Manifold
    target: AffineTarget

    @property
    def n(self) -> int:
        return self.A.rows

    @property
    def m(self) -> int:
        return self.n + self.L.cols

    @property
    def k(self) -> int:
        return self.manifold.k

    def coarsen(self, factor: int) -> "CanonicalProblem":
        """The same problem sampled on a grid with `factor` times fewer steps."""
        w = self.weights
        return CanonicalProblem(
            grid=self.grid.coarsen(factor),
            A=self.A.every(factor),
            K=self.K.every(factor),
            L=self.L.every(factor),
            weights=Weights(G=w.G, Q=w.Q.every(factor), R=w.R.every(factor), N=w.N.every(factor), delta=w.delta),
            manifold=self.manifold,
            target=self.target,
        )


@dataclass(frozen=True, eq=False)
class ValidatedProblem(CanonicalProblem):
    """A CanonicalProblem that passed validate_problem."""


@dataclass(frozen=True)
class SolverSettings:
    mc_paths: int = 10000
    seed: int = 0
    ode_substeps: int = 1
    workers: int = 1
    symmetry_tol: float = 1e-12
    psd_tol: float = -1e-10
    lsq_residual_tol: float = 1e-8
    mc_sigma_mult: float = 4.0
    perturbation_eps: float = 0.05
    perturbation_directions: int = 20
    forward_tol: float = 5e-3

    @staticmethod
    def from_raw(raw: dict[str, Any]) -> "SolverSettings":
        defaults = SolverSettings()
        values: dict[str, Any] = {}
        for f in fields(SolverSettings):
            value = raw.get(f.name, getattr(defaults, f.name))
            values[f.name] = int(value) if isinstance(getattr(defaults, f.name), int) else float(value)
        settings = SolverSettings(**values)
        settings.check()
        return settings

    def check(self) -> None:
        for name in ("mc_paths", "ode_substeps", "workers", "perturbation_directions"):
            if getattr(self, name) < 1:
                raise NotPositive(f"settings.{name} must be positive, got {getattr(self, name)}")
        for name in ("symmetry_tol", "lsq_residual_tol", "mc_sigma_mult", "perturbation_eps", "forward_tol"):
            if not getattr(self, name) > 0:
                raise NotPositive(f"settings.{name} must be positive, got {getattr(self, name)}")
        if not self.psd_tol <= 0:
            raise NotPositive(f"settings.psd_tol must be <= 0, got {self.psd_tol}")

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_path(path: CoeffPath, *, name: str, rows: int, cols: int, nodes: int) -> None:
    if path.nodes != nodes:
        raise DimensionMismatch(f"{name} has {path.nodes} nodes, grid has {nodes}")
    if (path.rows, path.cols) != (rows, cols):
        raise DimensionMismatch(f"{name} must be {rows}x{cols}, got {path.rows}x{path.cols}")


def _symmetric_weight(values: np.ndarray, *, name: str, settings: SolverSettings) -> np.ndarray:
    gap = asymmetry(values)
    if gap > settings.symmetry_tol:
        raise NotPositive(f"{name} is not symmetric (max asymmetry {gap:.3e})")
    return symmetrize(values)


def _min_eigs(values: np.ndarray) -> np.ndarray:
    if values.shape[-1] == 0:
        return np.zeros(values.shape[:-2])
    return np.linalg.eigvalsh(values)[..., 0]


def validate_problem(p: CanonicalProblem, s: SolverSettings | None = None) -> ValidatedProblem:
    """Check shapes, symmetry and definiteness, and return the problem tagged valid."""
    if isinstance(p, ValidatedProblem):
        return p
    s = s or SolverSettings()
    p.grid.check()
    nodes = p.grid.steps + 1
    n = p.A.rows
    if n < 1:
        raise DimensionMismatch("state dimension must be at least 1")
    _check_path(p.A, name="A", rows=n, cols=n, nodes=nodes)
    _check_path(p.K, name="K", rows=n, cols=n, nodes=nodes)
    if p.L.rows != n or p.L.cols < 1:
        raise DimensionMismatch(f"L must be {n}x(m-n) with m > n, got {p.L.rows}x{p.L.cols}")
    _check_path(p.L, name="L", rows=n, cols=p.L.cols, nodes=nodes)
    mn = p.L.cols

    w = p.weights
    if w.G.shape != (n, n):
        raise DimensionMismatch(f"weights.G must be {n}x{n}, got {w.G.shape}")
    _check_path(w.Q, name="weights.Q", rows=n, cols=n, nodes=nodes)
    _check_path(w.R, name="weights.R", rows=n, cols=n, nodes=nodes)
    _check_path(w.N, name="weights.N", rows=mn, cols=mn, nodes=nodes)
    if not np.all(np.isfinite(w.G)):
        raise ValidationError("weights.G has non-finite entries")
    if not (math.isfinite(w.delta) and w.delta > 0):
        raise NotPositive(f"weights.delta must be positive, got {w.delta}")

    F, b = p.manifold.F, p.manifold.b
    if F.shape[1] != n or not 1 <= F.shape[0] <= n:
        raise DimensionMismatch(f"manifold.F must be kx{n} with 1 <= k <= {n}, got {F.shape}")
    if b.shape != (F.shape[0],):
        raise DimensionMismatch(f"manifold.b must have {F.shape[0]} entries, got {b.shape}")
    if p.target.c0.shape != (n,) or p.target.c1.shape != (n,):
        raise DimensionMismatch(f"target.c0 and target.c1 must have {n} entries")
    for name, arr in (("manifold.F", F), ("manifold.b", b), ("target.c0", p.target.c0), ("target.c1", p.target.c1)):
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} has non-finite entries")

    G = _symmetric_weight(w.G, name="weights.G", settings=s)
    Q = _symmetric_weight(w.Q.values, name="weights.Q", settings=s)
    R = _symmetric_weight(w.R.values, name="weights.R", settings=s)
    N = _symmetric_weight(w.N.values, name="weights.N", settings=s)

    if _min_eigs(G[None])[0] < s.psd_tol:
        raise NotPositive("weights.G is not positive semidefinite")
    for name, arr in (("weights.Q", Q), ("weights.R", R)):
        bad = np.flatnonzero(_min_eigs(arr) < s.psd_tol)
        if bad.size:
            raise NotPositive(f"{name} is not positive semidefinite at node {int(bad[0])}")
    bad = np.flatnonzero(_min_eigs(N) - w.delta < s.psd_tol)
    if bad.size:
        raise NotPositive(f"weights.N is below delta*I (delta={w.delta}) at node {int(bad[0])}")

    logger.debug("validated problem n=%d m=%d k=%d steps=%d", n, n + mn, F.shape[0], p.grid.steps)
    return ValidatedProblem(
        grid=p.grid,
        A=p.A,
        K=p.K,
        L=p.L,
        weights=Weights(G=G, Q=CoeffPath(Q), R=CoeffPath(R), N=CoeffPath(N), delta=float(w.delta)),
        manifold=p.manifold,
        target=p.target,
    )
