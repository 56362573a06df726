from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from manifoldlq.canonical import TransformResult
from manifoldlq.errors import DimensionMismatch, NonFinite, NumericalFailure
from manifoldlq.linalg import (
    PSEUDO_INVERSE_CUTOFF,
    lstsq_min_norm,
    min_eig,
    pd_inv_sqrt,
    psd_sqrt,
    relative_residual,
    sym_pinv_solve,
)
from manifoldlq.mc_engine import (
    GramianEstimate,
    NoiseEnsemble,
    estimate_gramian,
    interval_nodes,
    map_path_chunks,
    mean_and_se,
    propagate_fundamental,
)
from manifoldlq.problem import CoeffPath, ValidatedProblem
from manifoldlq.riccati import PhiCoeffs, SigmaPath

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class HatCoefficients:
    Ahat: CoeffPath
    Khat: CoeffPath
    Lhat: CoeffPath


@dataclass(frozen=True, eq=False)
class ReachabilityResult:
    reachable: bool
    xi: np.ndarray
    residual: float
    margin: float
    threshold: float


@dataclass(frozen=True, eq=False)
class GramianCheck:
    estimate: GramianEstimate
    sigma: np.ndarray
    max_z_score: float
    ok: bool


@dataclass(frozen=True)
class CandidateIdentity:
    residual: float
    se: float


def hat_coefficients(sig: SigmaPath, p: ValidatedProblem) -> HatCoefficients:
    w = p.weights
    nodes = p.grid.steps + 1
    ahat, khat, lhat = [], [], []
    for i in range(nodes):
        s = sig[i]
        n_low = min_eig(w.N[i])
        if n_low - w.delta < -1e-10:
            raise NumericalFailure(f"N has eigenvalue {n_low:.6g} below delta={w.delta} at node {i}")
        try:
            n_inv_sqrt = pd_inv_sqrt(w.N[i])
        except np.linalg.LinAlgError as e:
            raise NumericalFailure(f"N is not positive definite at node {i}") from e
        k_i = sig.solve_plus_sigma_r(i, p.K[i].T, trans=1).T
        ahat.append(p.A[i] + s @ w.Q[i])
        khat.append(k_i)
        lhat.append(np.hstack([p.L[i] @ n_inv_sqrt, -s @ psd_sqrt(w.Q[i]), k_i @ s @ psd_sqrt(w.R[i])]))
    return HatCoefficients(Ahat=CoeffPath(np.stack(ahat)), Khat=CoeffPath(np.stack(khat)), Lhat=CoeffPath(np.stack(lhat)))


def exact_controllability_margin(sig: SigmaPath, t: float) -> float:
    """lambda_min(Sigma(t)); positive iff the system is exactly controllable on [t, T]."""
    return min_eig(sig[sig.grid.index_of(t)])


def reachability_solve(
    x0: np.ndarray,
    sig: SigmaPath,
    phi: PhiCoeffs,
    t: float,
    *,
    tol: float = 1e-8,
) -> ReachabilityResult:
    """Minimal-norm xi with Sigma(t) xi = x0 + a(t)."""
    i = sig.grid.index_of(t)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (sig.n,):
        raise DimensionMismatch(f"initial state must have {sig.n} entries, got {x0.shape}")
    gram = sig[i]
    rhs = x0 + phi.a[i]
    xi = sym_pinv_solve(gram, rhs, cutoff=PSEUDO_INVERSE_CUTOFF)
    residual, scale = relative_residual(gram, xi, rhs)
    result = ReachabilityResult(
        reachable=residual <= tol * scale,
        xi=xi,
        residual=residual,
        margin=min_eig(gram),
        threshold=tol * scale,
    )
    logger.info("reachability at t=%g: reachable=%s residual=%.3e", t, result.reachable, residual)
    return result


def manifold_reachability_solve(
    F: np.ndarray,
    b: np.ndarray,
    sig: SigmaPath,
    phi: PhiCoeffs,
    t: float,
    *,
    tol: float = 1e-8,
) -> ReachabilityResult:
    """Minimal-norm xi with F Sigma(t) xi = b + F a(t)."""
    i = sig.grid.index_of(t)
    F = np.atleast_2d(np.asarray(F, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if F.shape[1] != sig.n or b.shape != (F.shape[0],):
        raise DimensionMismatch(f"F must be kx{sig.n} and b a k-vector, got {F.shape} and {b.shape}")
    lhs = F @ sig[i]
    rhs = b + F @ phi.a[i]
    xi = lstsq_min_norm(lhs, rhs, cutoff=PSEUDO_INVERSE_CUTOFF)
    residual, scale = relative_residual(lhs, xi, rhs)
    return ReachabilityResult(
        reachable=residual <= tol * scale,
        xi=xi,
        residual=residual,
        margin=min_eig(sig[i]),
        threshold=tol * scale,
    )


def gramian_riccati_check(
    sig: SigmaPath,
    hat: HatCoefficients,
    noise: NoiseEnsemble,
    t: float,
    *,
    sigma_mult: float = 4.0,
) -> GramianCheck:
    """Compare the Monte Carlo hat-system Gramian over [t, T] with Sigma(t)."""
    estimate = estimate_gramian(t, noise.grid.t_end, hat.Ahat, hat.Khat, hat.Lhat, noise)
    sigma = np.array(sig[sig.grid.index_of(t)])
    z = estimate.max_z_score(sigma)
    return GramianCheck(estimate=estimate, sigma=sigma, max_z_score=z, ok=z <= sigma_mult)


def candidate_identity_check(
    xi: np.ndarray,
    hat: HatCoefficients,
    noise: NoiseEnsemble,
    t0: float,
    t1: float,
) -> CandidateIdentity:
    """Check -E int Phi(t0,s) Lhat(s) v(s) ds = Psi(t0,t1) xi for v(s) = -Lhat^T Phi(t0,s)^T xi.

    Both sides are estimated on the same noise. The returned se combines the
    standard errors of the two estimates.
    """
    grid = noise.grid
    i0, i1 = interval_nodes(grid, t0, t1)
    xi = np.asarray(xi, dtype=float)
    n = hat.Ahat.rows

    def run(lo: int, hi: int) -> np.ndarray:
        acc = np.zeros((hi - lo, n))

        def add(i: int, x: np.ndarray) -> None:
            xl = x @ hat.Lhat[i]
            v = -np.einsum("pji,j->pi", xl, xi)
            acc[:] -= grid.h * np.einsum("pij,pj->pi", xl, v)

        propagate_fundamental(noise.chunk(lo, hi), hat.Ahat, hat.Khat, grid.h, i0, i1, add)
        return acc

    driven = np.concatenate(map_path_chunks(run, noise.paths, noise.workers), axis=0)
    if not np.all(np.isfinite(driven)):
        raise NonFinite("candidate control integrand overflowed")
    lhs, lhs_se = mean_and_se(driven)
    gram = estimate_gramian(t0, t1, hat.Ahat, hat.Khat, hat.Lhat, noise)
    rhs = gram.psi_hat @ xi
    rhs_se = gram.se @ np.abs(xi)
    scale = 1.0 + float(np.linalg.norm(rhs))
    return CandidateIdentity(
        residual=float(np.linalg.norm(lhs - rhs)) / scale,
        se=float(np.hypot(np.linalg.norm(lhs_se), np.linalg.norm(rhs_se))) / scale,
    )


def raw_gramian(transform: TransformResult, noise: NoiseEnsemble, t0: float, t1: float) -> GramianEstimate:
    """Gramian of the canonical raw system, with dPhi = -Phi Abar ds - Phi K dW and loading L."""
    return estimate_gramian(t0, t1, transform.Abar, transform.K, transform.L, noise)
