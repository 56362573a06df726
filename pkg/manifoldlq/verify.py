from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from manifoldlq.config import RunConfig
from manifoldlq.controllability import (
    HatCoefficients,
    candidate_identity_check,
    gramian_riccati_check,
    hat_coefficients,
    reachability_solve,
)
from manifoldlq.linalg import asymmetry
from manifoldlq.mc_engine import represent_terminal_expectation
from manifoldlq.problem import ValidatedProblem
from manifoldlq.report import resolved_settings
from manifoldlq.riccati import SigmaPath, riccati_residual
from manifoldlq.solver import (
    Solution,
    forward_consistency_check,
    forward_convergence_check,
    perturbation_optimality_check,
    random_directions,
    range_lemma_check,
    solve,
    stationarity_check,
)

logger = logging.getLogger(__name__)

RANGE_LEMMA_TRIALS = 100


@dataclass(frozen=True)
class Finding:
    kind: str
    severity: str
    summary: str
    details: dict[str, Any] | None = None


def _result(kind: str, ok: bool, summary: str, **details: Any) -> dict[str, Any]:
    return {"kind": kind, "ok": bool(ok), "summary": summary, "details": details}


def solution_checks(sol: Solution) -> dict[str, float]:
    """Scalar diagnostics reported by `solve`."""
    p, ens = sol.problem, sol.ensemble
    r1, r2 = stationarity_check(ens, sol.multiplier, p)
    eta = p.target.realize(sol.noise.w[:, -1])
    manifold_gap = ens.x[:, 0] @ p.manifold.F.T - p.manifold.b
    return {
        "forward_consistency": forward_consistency_check(ens, p, sol.noise),
        "stationarity_r1": r1,
        "stationarity_r2": r2,
        "manifold_error": float(np.max(np.linalg.norm(manifold_gap, axis=1))),
        "terminal_error": float(np.max(np.abs(ens.x[:, -1] - eta))),
    }


def _check_riccati_invariants(sig: SigmaPath, psd_tol: float) -> dict[str, Any]:
    terminal_zero = bool(np.all(sig[sig.grid.steps] == 0.0))
    worst_asym = max(asymmetry(sig[i]) for i in range(sig.grid.steps + 1))
    low = float(np.min(sig.min_eigs()))
    ok = terminal_zero and worst_asym <= 1e-12 and low >= psd_tol
    return _result(
        "riccati_invariants",
        ok,
        f"Sigma(T)=0: {terminal_zero}, max asymmetry {worst_asym:.3e}, min eigenvalue {low:.3e}",
        terminal_zero=terminal_zero,
        max_asymmetry=worst_asym,
        min_eigenvalue=low,
    )


def _check_riccati_residual(sig: SigmaPath, p: ValidatedProblem) -> dict[str, Any]:
    residual = riccati_residual(sig, p)
    scale = float(np.max(np.abs(sig.values)))
    tol = max(1e-6, 10.0 * p.grid.h**2 * (1.0 + scale))
    return _result("riccati_residual", residual <= tol, f"central-difference residual {residual:.3e} (tol {tol:.1e})", residual=residual, tol=tol)


def _check_terminal_exactness(sol: Solution, checks: dict[str, float]) -> dict[str, Any]:
    err = checks["terminal_error"]
    scale = 1.0 + float(np.max(np.abs(sol.problem.target.realize(sol.noise.w[:, -1]))))
    tol = 1e-12 * scale
    return _result("terminal_exactness", err <= tol, f"max |x*(T) - eta| = {err:.3e}", error=err, tol=tol)


def _check_manifold_error(sol: Solution, checks: dict[str, float]) -> dict[str, Any]:
    err = checks["manifold_error"]
    tol = sol.problem.k * (sol.multiplier.residual + 1e-10) * (1.0 + float(np.linalg.norm(sol.problem.manifold.b)))
    return _result("manifold_error", err <= tol, f"max |F x*(t) - b| = {err:.3e}", error=err, tol=tol)


def _check_forward_consistency(sol: Solution, checks: dict[str, float]) -> dict[str, Any]:
    dev = checks["forward_consistency"]
    exact_tol = 1e-12 * (1.0 + float(np.max(np.abs(sol.ensemble.x))))
    if dev <= exact_tol:
        return _result("forward_consistency", True, f"max forward deviation {dev:.3e} (exact scheme)", max_dev=dev, tol=exact_tol)
    levels = forward_convergence_check(sol.problem, sol.noise, sol.settings, fine_deviation=dev)
    if len(levels) < 2:
        tol = sol.settings.forward_tol
        return _result(
            "forward_consistency",
            dev <= tol,
            f"max forward deviation {dev:.3e} (grid cannot be coarsened, tol {tol:.1e})",
            max_dev=dev,
            tol=tol,
        )
    devs = [d for _, d in levels]
    ok = all(coarser > finer for coarser, finer in zip(devs, devs[1:]))
    trail = ", ".join(f"step x{f}: {d:.3e}" for f, d in levels)
    return _result(
        "forward_consistency",
        ok,
        f"forward deviation by step refinement {trail} ({'decreasing' if ok else 'not decreasing'})",
        max_dev=dev,
        factors=[f for f, _ in levels],
        deviations=devs,
    )


def _check_stationarity(sol: Solution, checks: dict[str, float]) -> dict[str, Any]:
    p, ens = sol.problem, sol.ensemble
    r1, r2 = checks["stationarity_r1"], checks["stationarity_r2"]
    lty = float(np.max(np.abs(np.einsum("sji,psj->psi", p.L.values, ens.y))))
    cond_n = float(np.max(np.linalg.cond(p.weights.N.values)))
    tol1 = 1e-14 * (1.0 + lty) * max(1.0, cond_n)
    tol2 = 1e-10 * (1.0 + float(np.max(np.abs(ens.y[:, 0]))))
    return _result(
        "stationarity",
        r1 <= tol1 and r2 <= tol2,
        f"r1 {r1:.3e} (tol {tol1:.1e}), r2 {r2:.3e} (tol {tol2:.1e})",
        r1=r1,
        r2=r2,
        tol_r1=tol1,
        tol_r2=tol2,
    )


def _check_gramian_riccati(sol: Solution, hat: HatCoefficients) -> dict[str, Any]:
    check = gramian_riccati_check(sol.sigma, hat, sol.noise, sol.problem.grid.t_start, sigma_mult=sol.settings.mc_sigma_mult)
    return _result(
        "gramian_riccati",
        check.ok,
        f"Monte Carlo Gramian vs Sigma(t): max z-score {check.max_z_score:.3g}",
        psi_hat=check.estimate.psi_hat,
        se=check.estimate.se,
        sigma=check.sigma,
        max_z_score=check.max_z_score,
    )


def _check_bsde_oracle(sol: Solution, hat: HatCoefficients) -> dict[str, Any]:
    p = sol.problem
    estimate, se = represent_terminal_expectation(p.target, None, hat.Ahat, hat.Khat, sol.noise)
    expected = -sol.phi.a[0]
    gap = np.abs(estimate - expected)
    allowed = sol.settings.mc_sigma_mult * se + 1e-10 * (1.0 + np.abs(expected))
    return _result(
        "bsde_oracle",
        bool(np.all(gap <= allowed)),
        f"represented E[Gamma eta] vs -a(t): max gap {float(np.max(gap)):.3e}",
        estimate=estimate,
        se=se,
        expected=expected,
    )


def _check_candidate_identity(sol: Solution, hat: HatCoefficients) -> dict[str, Any]:
    grid = sol.problem.grid
    reach = reachability_solve(sol.ensemble.x[0, 0], sol.sigma, sol.phi, grid.t_start, tol=sol.settings.lsq_residual_tol)
    identity = candidate_identity_check(reach.xi, hat, sol.noise, grid.t_start, grid.t_end)
    allowed = sol.settings.mc_sigma_mult * identity.se + 1e-12
    return _result(
        "candidate_identity",
        identity.residual <= allowed,
        f"transfer identity residual {identity.residual:.3e} (se {identity.se:.3e})",
        residual=identity.residual,
        se=identity.se,
        xi=reach.xi,
    )


def _check_perturbation_optimality(sol: Solution) -> dict[str, Any]:
    p, s = sol.problem, sol.settings
    directions = random_directions(s.perturbation_directions, p.grid, p.L.cols, s.seed)
    rows = perturbation_optimality_check(
        sol.multiplier,
        sol.sigma,
        sol.phi,
        p,
        sol.noise,
        directions,
        s.perturbation_eps,
        ensemble=sol.ensemble,
        sigma_mult=s.mc_sigma_mult,
    )
    failed = [i for i, row in enumerate(rows) if not row.ok]
    return _result(
        "perturbation_optimality",
        not failed,
        f"{len(rows) - len(failed)}/{len(rows)} directions increase the Lagrangian cost",
        eps=s.perturbation_eps,
        failed_directions=failed,
        directions=[asdict(row) for row in rows],
    )


def _check_range_lemma(sol: Solution) -> dict[str, Any]:
    p, s = sol.problem, sol.settings
    worst = range_lemma_check(p.n, p.k, RANGE_LEMMA_TRIALS, s.seed)
    return _result(
        "range_lemma",
        worst <= s.lsq_residual_tol,
        f"max relative residual {worst:.3e} over {RANGE_LEMMA_TRIALS} random cases",
        max_relative_residual=worst,
    )


def run_verify(config: RunConfig) -> dict[str, Any]:
    sol = solve(config.problem, config.settings)
    hat = hat_coefficients(sol.sigma, sol.problem)
    checks = solution_checks(sol)

    results = [
        _check_riccati_invariants(sol.sigma, sol.settings.psd_tol),
        _check_riccati_residual(sol.sigma, sol.problem),
        _check_terminal_exactness(sol, checks),
        _check_manifold_error(sol, checks),
        _check_forward_consistency(sol, checks),
        _check_stationarity(sol, checks),
        _check_gramian_riccati(sol, hat),
        _check_bsde_oracle(sol, hat),
        _check_candidate_identity(sol, hat),
        _check_perturbation_optimality(sol),
        _check_range_lemma(sol),
    ]
    findings = [
        asdict(Finding(kind=f"{row['kind']}_failed", severity="error", summary=row["summary"], details=row["details"]))
        for row in results
        if not row["ok"]
    ]
    for row in results:
        logger.info("check %s: %s", row["kind"], "ok" if row["ok"] else "FAILED")

    return {
        "command": "verify",
        "score": "green" if not findings else "red",
        "lambda_star": sol.multiplier.lambda_star,
        "checks": results,
        "findings": findings,
        "summary": {
            "checks_total": len(results),
            "checks_failed": len(findings),
        },
        "settings": resolved_settings(sol.settings, sol.problem.grid),
    }
