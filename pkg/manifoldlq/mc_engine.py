from __future__ import annotations

import concurrent.futures
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, TypeVar

import numpy as np

from manifoldlq.errors import DimensionMismatch, NonFinite, Singular
from manifoldlq.linalg import symmetrize
from manifoldlq.problem import AffineTarget, CoeffPath, TimeGrid

logger = logging.getLogger(__name__)

PATH_CHUNK = 256
_SEED_MASK = (1 << 64) - 1
_SINGULAR_COND = 1.0 / np.finfo(float).eps

T = TypeVar("T")


def path_chunks(paths: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + PATH_CHUNK, paths)) for lo in range(0, paths, PATH_CHUNK)]


def map_path_chunks(fn: Callable[[int, int], T], paths: int, workers: int = 1) -> list[T]:
    """Apply fn(lo, hi) to every path chunk; results come back in path order."""
    chunks = path_chunks(paths)
    if workers <= 1 or len(chunks) <= 1:
        return [fn(lo, hi) for lo, hi in chunks]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda c: fn(*c), chunks))


def path_stream(seed: int, path: int) -> np.random.Generator:
    key = np.array([int(seed) & _SEED_MASK, int(path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def mean_and_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Path mean and standard error along axis 0."""
    samples = np.asarray(samples, dtype=float)
    mean = np.mean(samples, axis=0)
    if samples.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, np.std(samples, axis=0, ddof=1) / np.sqrt(samples.shape[0])


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    seed: int
    grid: TimeGrid
    increments: np.ndarray
    workers: int = 1

    @property
    def paths(self) -> int:
        return int(self.increments.shape[0])

    @cached_property
    def w(self) -> np.ndarray:
        """Brownian paths W(s_i), shape (P, M+1), with W(t_start) = 0."""
        out = np.zeros((self.paths, self.grid.steps + 1))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        out.setflags(write=False)
        return out

    def coarsen(self, factor: int) -> "NoiseEnsemble":
        """The same Brownian paths observed on a grid with `factor` times fewer steps."""
        grid = self.grid.coarsen(factor)
        summed = self.increments.reshape(self.paths, grid.steps, int(factor)).sum(axis=2)
        summed.setflags(write=False)
        return NoiseEnsemble(seed=self.seed, grid=grid, increments=summed, workers=self.workers)

    def chunk(self, lo: int, hi: int) -> np.ndarray:
        return self.increments[lo:hi]


def generate_noise(seed: int, paths: int, grid: TimeGrid, *, workers: int = 1) -> NoiseEnsemble:
    if paths < 1:
        raise ValueError(f"paths must be positive, got {paths}")
    grid.check()
    scale = np.sqrt(grid.h)

    def draw(lo: int, hi: int) -> np.ndarray:
        return np.stack([path_stream(seed, p).standard_normal(grid.steps) * scale for p in range(lo, hi)])

    increments = np.concatenate(map_path_chunks(draw, paths, workers), axis=0)
    increments.setflags(write=False)
    logger.debug("generated %d noise paths on %d steps (seed=%d)", paths, grid.steps, seed)
    return NoiseEnsemble(seed=int(seed), grid=grid, increments=increments, workers=int(workers))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    values: np.ndarray

    @property
    def paths(self) -> int:
        return int(self.values.shape[0])

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]


def _node_term(term: np.ndarray | None, lo: int, hi: int, i: int) -> np.ndarray | float:
    if term is None:
        return 0.0
    if term.ndim == 3:
        return term[lo:hi, i]
    return term[i]


def euler_linear_sde(
    alpha: CoeffPath | None,
    gamma: np.ndarray | None,
    kappa: CoeffPath | None,
    rho: np.ndarray | None,
    init: np.ndarray,
    noise: NoiseEnsemble,
) -> PathEnsemble:
    """Left-point Euler scheme for dX = (alpha X + gamma) ds + (kappa X + rho) dW.

    alpha and kappa are n x n coefficient paths (None for zero). gamma and rho are either
    shared forcing terms of shape (M+1, n) or per-path terms of shape (P, M+1, n).
    init is an n-vector or a (P, n) array.
    """
    grid = noise.grid
    init = np.asarray(init, dtype=float)
    n = init.shape[-1]
    for name, path in (("alpha", alpha), ("kappa", kappa)):
        if path is not None and (path.nodes != grid.steps + 1 or (path.rows, path.cols) != (n, n)):
            raise DimensionMismatch(f"{name} must be {n}x{n} on {grid.steps + 1} nodes")
    gamma = None if gamma is None else np.asarray(gamma, dtype=float)
    rho = None if rho is None else np.asarray(rho, dtype=float)

    def run(lo: int, hi: int) -> np.ndarray:
        dw = noise.chunk(lo, hi)
        out = np.empty((hi - lo, grid.steps + 1, n))
        x = np.broadcast_to(init if init.ndim == 1 else init[lo:hi], (hi - lo, n)).copy()
        out[:, 0] = x
        for i in range(grid.steps):
            drift = _node_term(gamma, lo, hi, i)
            diffusion = _node_term(rho, lo, hi, i)
            if alpha is not None:
                drift = drift + x @ alpha[i].T
            if kappa is not None:
                diffusion = diffusion + x @ kappa[i].T
            x = x + drift * grid.h + diffusion * dw[:, i, None]
            out[:, i + 1] = x
        if not np.all(np.isfinite(out)):
            bad = lo + int(np.flatnonzero(~np.all(np.isfinite(out.reshape(hi - lo, -1)), axis=1))[0])
            raise NonFinite(f"linear SDE overflowed on path {bad}")
        return out

    values = np.concatenate(map_path_chunks(run, noise.paths, noise.workers), axis=0)
    return PathEnsemble(grid=grid, values=values)


def propagate_fundamental(
    dw: np.ndarray,
    drift: CoeffPath,
    diffusion: CoeffPath,
    h: float,
    i0: int,
    i1: int,
    visit: Callable[[int, np.ndarray], None],
) -> np.ndarray:
    """Euler steps of dX = -X drift ds - X diffusion dW from X(s_i0) = I to node i1.

    visit(i, X) sees X at every node i0 <= i < i1; the value at i1 is returned.
    """
    n = drift.rows
    x = np.broadcast_to(np.eye(n), (dw.shape[0], n, n)).copy()
    eye = np.eye(n)
    for i in range(i0, i1):
        visit(i, x)
        step = eye - drift[i] * h - diffusion[i] * dw[:, i, None, None]
        x = x @ step
    return x


@dataclass(frozen=True, eq=False)
class FundamentalEnsemble:
    """Per-path fundamental matrices X with dX = -X drift ds - X diffusion dW, X(t_start) = I.

    kind is one of "Gamma", "Phi" or "Pi" and only labels the role of the pair.
    """

    kind: str
    drift: CoeffPath
    diffusion: CoeffPath
    grid: TimeGrid
    values: np.ndarray

    def relative(self, i0: int) -> np.ndarray:
        """X(s_i0)^{-1} X(s_i) for i >= i0, shape (P, M+1-i0, n, n)."""
        start = self.values[:, i0]
        conds = np.linalg.cond(start)
        bad = np.flatnonzero(~(conds < _SINGULAR_COND))
        if bad.size:
            logger.warning("fundamental matrix %s is singular at node %d on path %d", self.kind, i0, int(bad[0]))
            raise Singular(f"{self.kind}(s_{i0}) is numerically singular", path=int(bad[0]))
        return np.linalg.solve(start[:, None], self.values[:, i0:])


FUNDAMENTAL_KINDS = ("Gamma", "Phi", "Pi")


def fundamental_matrix(kind: str, coeff1: CoeffPath, coeff2: CoeffPath, noise: NoiseEnsemble) -> FundamentalEnsemble:
    if kind not in FUNDAMENTAL_KINDS:
        raise ValueError(f"unknown fundamental matrix kind {kind!r}")
    grid = noise.grid
    for name, path in (("coeff1", coeff1), ("coeff2", coeff2)):
        if path.nodes != grid.steps + 1 or path.rows != path.cols or path.rows != coeff1.rows:
            raise DimensionMismatch(f"{name} must be square {coeff1.rows}x{coeff1.rows} on {grid.steps + 1} nodes")

    def run(lo: int, hi: int) -> np.ndarray:
        n = coeff1.rows
        out = np.empty((hi - lo, grid.steps + 1, n, n))

        def keep(i: int, x: np.ndarray) -> None:
            out[:, i] = x

        out[:, -1] = propagate_fundamental(noise.chunk(lo, hi), coeff1, coeff2, grid.h, 0, grid.steps, keep)
        if not np.all(np.isfinite(out)):
            raise NonFinite(f"fundamental matrix {kind} overflowed in paths {lo}..{hi - 1}")
        return out

    values = np.concatenate(map_path_chunks(run, noise.paths, noise.workers), axis=0)
    values.setflags(write=False)
    return FundamentalEnsemble(kind=kind, drift=coeff1, diffusion=coeff2, grid=grid, values=values)


@dataclass(frozen=True, eq=False)
class GramianEstimate:
    psi_hat: np.ndarray
    se: np.ndarray
    t0: float
    t1: float
    paths: int

    def z_scores(self, reference: np.ndarray, *, atol: float = 1e-12) -> np.ndarray:
        """|psi_hat - reference| / se entrywise; gaps within atol score 0, other zero-se entries inf."""
        gap = np.abs(self.psi_hat - np.asarray(reference, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.se > 0, gap / np.where(self.se > 0, self.se, 1.0), np.inf)
        return np.where(gap <= atol, 0.0, z)

    def max_z_score(self, reference: np.ndarray, *, atol: float = 1e-12) -> float:
        return float(np.max(self.z_scores(reference, atol=atol)))


def interval_nodes(grid: TimeGrid, t0: float, t1: float) -> tuple[int, int]:
    i0, i1 = grid.index_of(t0), grid.index_of(t1)
    if not i0 < i1:
        raise DimensionMismatch(f"interval requires t0 < t1, got [{t0}, {t1}]")
    return i0, i1


def estimate_gramian(
    t0: float,
    t1: float,
    drift_coeff: CoeffPath,
    diff_coeff: CoeffPath,
    lhat: CoeffPath,
    noise: NoiseEnsemble,
) -> GramianEstimate:
    """Monte Carlo estimate of E int_{t0}^{t1} X(t0,s) Lhat(s) Lhat(s)^T X(t0,s)^T ds."""
    grid = noise.grid
    i0, i1 = interval_nodes(grid, t0, t1)
    n = drift_coeff.rows
    if lhat.rows != n or lhat.nodes != grid.steps + 1:
        raise DimensionMismatch(f"Lhat must have {n} rows on {grid.steps + 1} nodes")

    def run(lo: int, hi: int) -> np.ndarray:
        acc = np.zeros((hi - lo, n, n))

        def add(i: int, x: np.ndarray) -> None:
            xl = x @ lhat[i]
            acc[:] += grid.h * (xl @ np.swapaxes(xl, 1, 2))

        propagate_fundamental(noise.chunk(lo, hi), drift_coeff, diff_coeff, grid.h, i0, i1, add)
        return acc

    grams = np.concatenate(map_path_chunks(run, noise.paths, noise.workers), axis=0)
    if not np.all(np.isfinite(grams)):
        raise NonFinite("Gramian integrand overflowed")
    psi_hat, se = mean_and_se(grams)
    return GramianEstimate(psi_hat=symmetrize(psi_hat), se=symmetrize(se), t0=float(t0), t1=float(t1), paths=noise.paths)


def represent_terminal_expectation(
    eta: AffineTarget,
    f: np.ndarray | None,
    A: CoeffPath,
    C: CoeffPath,
    noise: NoiseEnsemble,
    *,
    t0: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of Gamma(t0,T) eta - int_{t0}^T Gamma(t0,s) f(s) ds.

    Gamma solves dGamma = -Gamma A ds - Gamma C dW; f is an (M+1, n) driver or None.
    """
    grid = noise.grid
    t0 = grid.t_start if t0 is None else t0
    i0, i1 = interval_nodes(grid, t0, grid.t_end)
    n = A.rows
    f = None if f is None else np.asarray(f, dtype=float)
    w_end = noise.w[:, -1]

    def run(lo: int, hi: int) -> np.ndarray:
        acc = np.zeros((hi - lo, n))

        def add(i: int, x: np.ndarray) -> None:
            if f is not None:
                acc[:] -= grid.h * (x @ f[i])

        gamma_end = propagate_fundamental(noise.chunk(lo, hi), A, C, grid.h, i0, i1, add)
        target = eta.realize(w_end[lo:hi])
        return acc + np.einsum("pij,pj->pi", gamma_end, target)

    samples = np.concatenate(map_path_chunks(run, noise.paths, noise.workers), axis=0)
    if not np.all(np.isfinite(samples)):
        raise NonFinite("terminal representation overflowed")
    return mean_and_se(samples)
