from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from manifoldlq.errors import NonFinite, TargetUnreachableFromManifold
from manifoldlq.linalg import PSEUDO_INVERSE_CUTOFF, min_eig, relative_residual, sym_pinv_solve, symmetrize
from manifoldlq.mc_engine import NoiseEnsemble, euler_linear_sde, generate_noise, map_path_chunks, mean_and_se
from manifoldlq.problem import (
    CanonicalProblem,
    CoeffPath,
    Manifold,
    SolverSettings,
    TimeGrid,
    ValidatedProblem,
    Weights,
    validate_problem,
)
from manifoldlq.riccati import PhiCoeffs, SigmaPath, solve_sigma, solve_target_odes

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MultiplierResult:
    lambda_star: np.ndarray
    s_matrix: np.ndarray
    rhs: np.ndarray
    residual: float
    threshold: float
    minimal_norm: bool = True

    @property
    def solvable(self) -> bool:
        return self.residual <= self.threshold


@dataclass(frozen=True, eq=False)
class ControlEnsemble:
    """Per-path state and control trajectories, each shaped (P, M+1, dim)."""

    grid: TimeGrid
    x: np.ndarray
    z: np.ndarray
    v: np.ndarray

    @property
    def paths(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True, eq=False, kw_only=True)
class OptimalEnsemble(ControlEnsemble):
    y: np.ndarray
    lambda_star: np.ndarray
    noise: NoiseEnsemble


@dataclass(frozen=True, eq=False)
class CostEstimate:
    j_hat: float
    se: float
    breakdown: dict[str, float]
    per_path: np.ndarray
    lagrangian_j_hat: float | None = None
    lagrangian_se: float | None = None
    lagrangian_per_path: np.ndarray | None = None


@dataclass(frozen=True)
class PerturbationResult:
    delta_j: float
    se: float
    linear_term: float
    linear_se: float
    ok: bool


def _start_blocks(sig: SigmaPath, p: ValidatedProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = p.n
    G = p.weights.G
    plus = np.eye(n) + sig[0] @ G
    return G, plus, linalg.solve(plus, sig[0])


def solve_multiplier(
    sig: SigmaPath,
    phi: PhiCoeffs,
    p: ValidatedProblem,
    settings: SolverSettings | None = None,
) -> MultiplierResult:
    """Minimal-norm solution of F (I + Sigma G)^{-1} Sigma F^T lam = -(F (I + Sigma G)^{-1} phi(t) + b)."""
    settings = settings or SolverSettings()
    F, b = p.manifold.F, p.manifold.b
    _, plus, gain = _start_blocks(sig, p)
    s_matrix = symmetrize(F @ gain @ F.T)
    rhs = -(F @ linalg.solve(plus, phi.a[0]) + b)
    low = min_eig(s_matrix)
    if low < -1e-10:
        logger.warning("multiplier matrix has negative eigenvalue %.3e", low)
    lam = sym_pinv_solve(s_matrix, rhs, cutoff=PSEUDO_INVERSE_CUTOFF)
    residual, scale = relative_residual(s_matrix, lam, rhs)
    result = MultiplierResult(
        lambda_star=lam,
        s_matrix=s_matrix,
        rhs=rhs,
        residual=residual,
        threshold=settings.lsq_residual_tol * scale,
    )
    if not result.solvable:
        raise TargetUnreachableFromManifold(
            f"target is unreachable from the manifold: multiplier residual {residual:.6g} exceeds {result.threshold:.3g}",
            result=result,
        )
    logger.info("multiplier lambda*=%s (residual %.3e)", np.array2string(lam, precision=6), residual)
    return result


def simulate_optimal(
    mult: MultiplierResult,
    sig: SigmaPath,
    phi: PhiCoeffs,
    p: ValidatedProblem,
    noise: NoiseEnsemble,
) -> OptimalEnsemble:
    """Forward Euler sweep of the adjoint y* and decoupling recovery of (x*, z*, v*)."""
    grid = p.grid
    n, mn = p.n, p.L.cols
    w = p.weights
    F = p.manifold.F
    G = w.G
    y0 = linalg.solve(np.eye(n) + G @ sig[0], F.T @ mult.lambda_star - G @ phi.a[0])
    feedback = np.swapaxes(np.linalg.solve(w.N.values, np.swapaxes(p.L.values, 1, 2)), 1, 2)
    brownian = noise.w

    def run(lo: int, hi: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        count = hi - lo
        ys = np.empty((count, grid.steps + 1, n))
        xs = np.empty((count, grid.steps + 1, n))
        zs = np.empty((count, grid.steps + 1, n))
        vs = np.empty((count, grid.steps + 1, mn))
        dw = noise.chunk(lo, hi)
        y = np.broadcast_to(y0, (count, n)).copy()
        for i in range(grid.steps + 1):
            s = sig[i]
            phi_i = phi.phi(i, brownian[lo:hi, i])
            beta = phi.beta(i)
            ys[:, i] = y
            xs[:, i] = -(y @ s + phi_i)
            zs[:, i] = sig.solve_plus_sigma_r(i, (y @ p.K[i] @ s - beta).T).T
            vs[:, i] = y @ feedback[i]
            if i == grid.steps:
                break
            drift = -(y @ (p.A[i] + s @ w.Q[i]) + phi_i @ w.Q[i])
            diffusion = -sig.solve_plus_r_sigma(i, (y @ p.K[i] + beta @ w.R[i]).T).T
            y = y + drift * grid.h + diffusion * dw[:, i, None]
        if not (np.all(np.isfinite(ys)) and np.all(np.isfinite(zs))):
            raise NonFinite(f"optimal adjoint overflowed in paths {lo}..{hi - 1}")
        return ys, xs, zs, vs

    parts = map_path_chunks(run, noise.paths, noise.workers)
    y, x, z, v = (np.concatenate([part[j] for part in parts], axis=0) for j in range(4))
    logger.info("simulated %d optimal paths on %d steps", noise.paths, grid.steps)
    return OptimalEnsemble(grid=grid, x=x, z=z, v=v, y=y, lambda_star=mult.lambda_star, noise=noise)


def _quadratic(path: np.ndarray, weight: CoeffPath, h: float) -> np.ndarray:
    """Left Riemann sum of <W(s) q(s), q(s)> per path."""
    q = path[:, :-1]
    return h * np.einsum("psi,sij,psj->p", q, weight.values[:-1], q)


def evaluate_cost(
    ens: ControlEnsemble,
    p: ValidatedProblem,
    lam: np.ndarray | None = None,
) -> CostEstimate:
    h = p.grid.h
    w = p.weights
    x_start = ens.x[:, 0]
    parts = {
        "terminal": np.einsum("pi,ij,pj->p", x_start, w.G, x_start),
        "state": _quadratic(ens.x, w.Q, h),
        "diffusion": _quadratic(ens.z, w.R, h),
        "drift": _quadratic(ens.v, w.N, h),
    }
    per_path = parts["terminal"] + parts["state"] + parts["diffusion"] + parts["drift"]
    j_hat, se = mean_and_se(per_path)
    breakdown = {name: float(np.mean(values)) for name, values in parts.items()}
    if lam is None:
        return CostEstimate(j_hat=float(j_hat), se=float(se), breakdown=breakdown, per_path=per_path)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    lagrangian = per_path + 2.0 * (x_start @ (p.manifold.F.T @ lam))
    lj, lse = mean_and_se(lagrangian)
    return CostEstimate(
        j_hat=float(j_hat),
        se=float(se),
        breakdown=breakdown,
        per_path=per_path,
        lagrangian_j_hat=float(lj),
        lagrangian_se=float(lse),
        lagrangian_per_path=lagrangian,
    )


def forward_consistency_check(ens: ControlEnsemble, p: ValidatedProblem, noise: NoiseEnsemble) -> float:
    """Max deviation between x* and a forward Euler run of the state equation under (z*, v*)."""
    forcing = np.einsum("sij,psj->psi", p.K.values, ens.z) + np.einsum("sij,psj->psi", p.L.values, ens.v)
    forward = euler_linear_sde(p.A, forcing, None, ens.z, ens.x[:, 0], noise)
    return float(np.max(np.abs(forward.values - ens.x)))


CONVERGENCE_FACTORS = (8, 4, 2, 1)


def forward_convergence_check(
    p: ValidatedProblem,
    noise: NoiseEnsemble,
    settings: SolverSettings | None = None,
    *,
    factors: Sequence[int] = CONVERGENCE_FACTORS,
    fine_deviation: float | None = None,
) -> list[tuple[int, float]]:
    """Forward deviation re-solved on the same Brownian paths at each usable coarsening factor.

    Factors that do not divide the grid, or leave fewer than two steps, are skipped.
    Rows come coarsest first; `fine_deviation` stands in for factor 1 when given.
    """
    settings = settings or SolverSettings()
    steps = p.grid.steps
    usable = [f for f in sorted(set(int(f) for f in factors), reverse=True) if f >= 1 and steps % f == 0 and steps // f >= 2]
    rows: list[tuple[int, float]] = []
    for f in usable:
        if f == 1 and fine_deviation is not None:
            rows.append((1, float(fine_deviation)))
            continue
        coarse = validate_problem(p.coarsen(f), settings) if f > 1 else p
        coarse_noise = noise.coarsen(f) if f > 1 else noise
        sig = solve_sigma(coarse, settings)
        phi = solve_target_odes(sig, coarse.target, coarse)
        ens = simulate_optimal(solve_multiplier(sig, phi, coarse, settings), sig, phi, coarse, coarse_noise)
        rows.append((f, forward_consistency_check(ens, coarse, coarse_noise)))
    logger.info("forward deviation by coarsening factor: %s", rows)
    return rows


def stationarity_check(ens: OptimalEnsemble, mult: MultiplierResult, p: ValidatedProblem) -> tuple[float, float]:
    w = p.weights
    nv = np.einsum("sij,psj->psi", w.N.values, ens.v)
    lty = np.einsum("sji,psj->psi", p.L.values, ens.y)
    r1 = float(np.max(np.abs(nv - lty)))
    coupling = ens.y[:, 0] - ens.x[:, 0] @ w.G.T - p.manifold.F.T @ mult.lambda_star
    r2 = float(np.max(np.linalg.norm(coupling, axis=1)))
    return r1, r2


def state_perturbation(w: np.ndarray, p: ValidatedProblem) -> np.ndarray:
    """Discrete solution of x' = A x + L w with x(T) = 0, consistent with the forward Euler scheme."""
    grid = p.grid
    n = p.n
    out = np.zeros((grid.steps + 1, n))
    for i in range(grid.steps - 1, -1, -1):
        out[i] = linalg.solve(np.eye(n) + p.A[i] * grid.h, out[i + 1] - p.L[i] @ w[i] * grid.h)
    return out


def perturbation_optimality_check(
    mult: MultiplierResult,
    sig: SigmaPath,
    phi: PhiCoeffs,
    p: ValidatedProblem,
    noise: NoiseEnsemble,
    directions: Sequence[np.ndarray],
    eps: float,
    *,
    ensemble: OptimalEnsemble | None = None,
    sigma_mult: float = 4.0,
) -> list[PerturbationResult]:
    """Lagrangian cost change along deterministic drift-control directions, on common noise."""
    ens = ensemble if ensemble is not None else simulate_optimal(mult, sig, phi, p, noise)
    base = evaluate_cost(ens, p, mult.lambda_star).lagrangian_per_path
    results: list[PerturbationResult] = []
    for w in directions:
        w = np.asarray(w, dtype=float).reshape(p.grid.steps + 1, p.L.cols)
        x_tilde = state_perturbation(w, p)

        def shifted(sign: float) -> np.ndarray:
            moved = ControlEnsemble(grid=ens.grid, x=ens.x + sign * eps * x_tilde, z=ens.z, v=ens.v + sign * eps * w)
            return evaluate_cost(moved, p, mult.lambda_star).lagrangian_per_path

        plus, minus = shifted(1.0), shifted(-1.0)
        delta, delta_se = mean_and_se(plus - base)
        linear, linear_se = mean_and_se((plus - minus) / (2.0 * eps))
        # first-order term of a stationary point vanishes up to sampling and O(h) quadrature error
        linear_tol = sigma_mult * linear_se + eps**2 + 10.0 * p.grid.h * (1.0 + float(np.max(np.abs(w))))
        results.append(
            PerturbationResult(
                delta_j=float(delta),
                se=float(delta_se),
                linear_term=float(linear),
                linear_se=float(linear_se),
                ok=bool(delta >= -sigma_mult * delta_se - 1e-12 and abs(linear) <= linear_tol),
            )
        )
    return results


def random_directions(count: int, grid: TimeGrid, dim: int, seed: int) -> list[np.ndarray]:
    """Seeded deterministic perturbation directions, alternating cubic polynomials and bang-bang paths."""
    rng = np.random.Generator(np.random.Philox(seed))
    tau = (grid.nodes - grid.t_start) / grid.horizon
    out = []
    for j in range(count):
        if j % 2 == 0:
            coeffs = rng.standard_normal((4, dim))
            out.append(np.stack([tau**k for k in range(4)], axis=1) @ coeffs)
        else:
            switches = np.sort(rng.uniform(0.0, 1.0, size=int(rng.integers(1, 5))))
            signs = rng.choice([-1.0, 1.0], size=(switches.size + 1, dim))
            segment = np.searchsorted(switches, tau, side="right")
            out.append(signs[segment] * np.abs(rng.standard_normal(dim)))
    return out


def range_lemma_check(n: int, k: int, trials: int, seed: int) -> float:
    """Largest relative residual of (F S F^T) lam = F S w over random F, PSD S of random rank and w.

    F S w always lies in the range of F S F^T, so the result stays at rounding level.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for _ in range(trials):
        root = rng.standard_normal((n, int(rng.integers(0, n + 1))))
        s = root @ root.T
        F = rng.standard_normal((k, n))
        lhs = symmetrize(F @ s @ F.T)
        rhs = F @ s @ rng.standard_normal(n)
        lam = sym_pinv_solve(lhs, rhs, cutoff=PSEUDO_INVERSE_CUTOFF)
        residual, scale = relative_residual(lhs, lam, rhs)
        worst = max(worst, residual / scale)
    return worst


def transfer_problem(p: CanonicalProblem, x0: np.ndarray) -> CanonicalProblem:
    """Minimum-energy transfer from x0: Q = R = 0, G = 0, N = I, F = I, b = x0."""
    grid = p.grid
    n, mn = p.n, p.L.cols
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return CanonicalProblem(
        grid=grid,
        A=p.A,
        K=p.K,
        L=p.L,
        weights=Weights(
            G=np.zeros((n, n)),
            Q=CoeffPath.zeros(n, n, grid),
            R=CoeffPath.zeros(n, n, grid),
            N=CoeffPath.constant(np.eye(mn), grid),
            delta=1.0,
        ),
        manifold=Manifold(F=np.eye(n), b=x0),
        target=p.target,
    )


def transfer_closed_form(p: CanonicalProblem) -> float | None:
    """(eta - b)^2 / (l^2 (T - t)) for a scalar problem with A = K = 0, constant L = l and deterministic eta."""
    if p.n != 1 or p.L.cols != 1 or np.any(p.A.values) or np.any(p.K.values) or np.any(p.target.c1):
        return None
    if not np.all(p.L.values == p.L.values[0]):
        return None
    gain = float(p.L.values[0, 0, 0]) ** 2
    if gain == 0.0:
        return None
    return float((p.target.c0[0] - p.manifold.b[0]) ** 2 / (gain * p.grid.horizon))


@dataclass(frozen=True, eq=False)
class Solution:
    problem: ValidatedProblem
    settings: SolverSettings
    sigma: SigmaPath
    phi: PhiCoeffs
    multiplier: MultiplierResult
    noise: NoiseEnsemble
    ensemble: OptimalEnsemble
    cost: CostEstimate


def solve(p: CanonicalProblem, settings: SolverSettings | None = None) -> Solution:
    """Validate, integrate, solve for the multiplier and simulate the optimal pair."""
    settings = settings or SolverSettings()
    problem = validate_problem(p, settings)
    logger.info("solving n=%d m=%d k=%d on %d steps with %d paths", problem.n, problem.m, problem.k, problem.grid.steps, settings.mc_paths)
    sig = solve_sigma(problem, settings)
    phi = solve_target_odes(sig, problem.target, problem)
    mult = solve_multiplier(sig, phi, problem, settings)
    noise = generate_noise(settings.seed, settings.mc_paths, problem.grid, workers=settings.workers)
    ens = simulate_optimal(mult, sig, phi, problem, noise)
    cost = evaluate_cost(ens, problem, mult.lambda_star)
    return Solution(
        problem=problem,
        settings=settings,
        sigma=sig,
        phi=phi,
        multiplier=mult,
        noise=noise,
        ensemble=ens,
        cost=cost,
    )
