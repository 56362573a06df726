from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from manifoldlq.config import RunConfig, load_run_config
from manifoldlq.controllability import (
    exact_controllability_margin,
    gramian_riccati_check,
    hat_coefficients,
    manifold_reachability_solve,
    raw_gramian,
    reachability_solve,
)
from manifoldlq.errors import ConfigError, NumericalError, TargetUnreachableFromManifold, ValidationError
from manifoldlq.mc_engine import generate_noise
from manifoldlq.problem import validate_problem
from manifoldlq.report import (
    dumps_report,
    resolved_settings,
    write_metadata,
    write_report,
    write_riccati_csv,
    write_trajectories,
    write_transform_csv,
)
from manifoldlq.riccati import solve_sigma, solve_target_odes
from manifoldlq.solver import Solution, solve, transfer_closed_form, transfer_problem
from manifoldlq.verify import run_verify, solution_checks

logger = logging.getLogger(__name__)


class ExitCode:
    ok = 0
    unreachable = 2
    invalid_config = 3
    numerical = 4


COMMANDS = ("solve", "reach", "gramian", "transform", "transfer", "verify")


def _fmt(x: Any) -> str:
    return np.array2string(np.asarray(x, dtype=float), precision=6, separator=", ")


def _emit_solve_text(report: dict) -> None:
    grid = (report.get("settings") or {}).get("grid") or {}
    print(f"{report.get('command')}: {grid.get('steps')} steps, {report.get('paths')} paths")
    print(f"lambda*: {_fmt(report.get('lambda_star'))} (residual {float(report.get('residual') or 0.0):.3e})")
    print(f"J: {float(report.get('j_hat') or 0.0):.8g} +/- {float(report.get('se') or 0.0):.3g}")
    if report.get("transfer_closed_form") is not None:
        print(f"closed-form transfer cost: {float(report['transfer_closed_form']):.8g}")
    checks = report.get("checks") or {}
    if checks:
        print("checks:")
        for name, value in checks.items():
            print(f"- {name}: {float(value):.3e}")


def _emit_reach_text(report: dict) -> None:
    print(f"reach: t={report.get('t')}")
    print(f"exact controllability margin: {float(report.get('margin') or 0.0):.6g}")
    verdict = "reachable" if report.get("reachable") else "unreachable"
    print(f"state: {verdict} (residual {float(report.get('residual') or 0.0):.3e}, threshold {float(report.get('threshold') or 0.0):.3e})")
    row = report.get("manifold") or {}
    if row:
        verdict = "reachable" if row.get("reachable") else "unreachable"
        print(f"manifold: {verdict} (residual {float(row.get('residual') or 0.0):.3e}, threshold {float(row.get('threshold') or 0.0):.3e})")
    gram = report.get("gramian_check") or {}
    if gram:
        print(f"gramian max z-score: {float(gram.get('max_z_score') or 0.0):.3g} ({'ok' if gram.get('ok') else 'outside band'})")


def _emit_gramian_text(report: dict) -> None:
    psi = np.asarray(report.get("psi_hat"), dtype=float)
    se = np.asarray(report.get('se'), dtype=float)
    sigma = np.asarray(report.get("sigma"), dtype=float)
    print(f"gramian: [{report.get('t0')}, {report.get('t1')}], {report.get('paths')} paths")
    print("entry  psi_hat  se  sigma")
    for i in range(psi.shape[0]):
        for j in range(psi.shape[1]):
            print(f"({i},{j})  {psi[i, j]:.8g}  {se[i, j]:.3g}  {sigma[i, j]:.8g}")
    print(f"max z-score: {float(report.get('max_z_score') or 0.0):.3g} ({'ok' if report.get('ok') else 'outside band'})")


def _emit_transform_text(report: dict) -> None:
    print(f"transform: n={report.get('n')} m={report.get('m')}")
    print(f"max |D M - (I, 0)|: {float(report.get('canonical_error') or 0.0):.3e}")
    print(f"max cond(M): {float(report.get('max_cond_M') or 0.0):.6g}")
    print(f"nondegeneracy margin: {float(report.get('nondegeneracy_margin') or 0.0):.6g}")
    gram = report.get("raw_gramian")
    if gram:
        print(f"raw Gramian: {_fmt(gram.get('psi_hat'))}")


def _emit_verify_text(report: dict) -> None:
    summary = report.get("summary") or {}
    print(f"verify score: {report.get('score')}")
    print(f"checks: {int(summary.get('checks_total') or 0)} total, {int(summary.get('checks_failed') or 0)} failed")
    for row in report.get("checks") or []:
        print(f"- [{'pass' if row.get('ok') else 'FAIL'}] {row.get('kind')}: {row.get('summary')}")
    findings = report.get("findings") or []
    if not findings:
        print("findings: none")
        return
    print("findings:")
    for f in findings:
        print(f"- [{f.get('severity')}] {f.get('kind')}: {f.get('summary')}")


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "paths": args.paths,
        "seed": args.seed,
        "workers": args.workers,
        "eps": args.eps,
        "steps": args.steps,
    }


def _load(args: argparse.Namespace) -> RunConfig:
    if (args.dump_riccati or args.dump_trajectories) and not args.out:
        raise ConfigError("--out", "dump flags need an output directory")
    config = RunConfig.from_raw(load_run_config(args.config), _overrides(args))
    args.resolved_settings = resolved_settings(config.settings, config.problem.grid)
    return config


def _finish(args: argparse.Namespace, report: dict, emit: Any, files: Sequence[Path] = (), *, workers: int = 1) -> None:
    if args.out:
        out = Path(args.out)
        written = [write_report(out, args.cmd, report), *files]
        write_metadata(out, args.cmd, started=args.started, workers=workers, files=written)
        logger.info("wrote %s", ", ".join(p.name for p in written))
    if args.json:
        print(dumps_report(report), end="")
    else:
        emit(report)


def _solution_report(command: str, sol: Solution) -> dict[str, Any]:
    ens, mult, cost = sol.ensemble, sol.multiplier, sol.cost
    return {
        "command": command,
        "lambda_star": mult.lambda_star,
        "residual": mult.residual,
        "j_hat": cost.j_hat,
        "se": cost.se,
        "checks": solution_checks(sol),
        "paths": ens.paths,
        "multiplier": {
            "threshold": mult.threshold,
            "s_matrix": mult.s_matrix,
            "rhs": mult.rhs,
            "minimal_norm": mult.minimal_norm,
        },
        "cost": {
            "breakdown": cost.breakdown,
            "lagrangian_j_hat": cost.lagrangian_j_hat,
            "lagrangian_se": cost.lagrangian_se,
        },
        "x_start_mean": np.mean(ens.x[:, 0], axis=0),
        "x_end_mean": np.mean(ens.x[:, -1], axis=0),
        "v_start_mean": np.mean(ens.v[:, 0], axis=0),
        "settings": resolved_settings(sol.settings, sol.problem.grid),
    }


def _dump_solution(args: argparse.Namespace, sol: Solution) -> list[Path]:
    files: list[Path] = []
    if args.dump_riccati:
        files.append(write_riccati_csv(Path(args.out) / "riccati.csv", sol.sigma, sol.phi))
    if args.dump_trajectories:
        files.extend(write_trajectories(Path(args.out), sol.ensemble))
    return files


def cmd_solve(args: argparse.Namespace) -> int:
    config = _load(args)
    sol = solve(config.problem, config.settings)
    report = _solution_report("solve", sol)
    _finish(args, report, _emit_solve_text, _dump_solution(args, sol), workers=config.settings.workers)
    return ExitCode.ok


def cmd_transfer(args: argparse.Namespace) -> int:
    config = _load(args)
    if config.x0 is None:
        raise ConfigError("initial_state", "required by transfer")
    problem = transfer_problem(config.problem, config.x0)
    sol = solve(problem, config.settings)
    report = _solution_report("transfer", sol)
    report["initial_state"] = config.x0
    report["transfer_closed_form"] = transfer_closed_form(problem)
    _finish(args, report, _emit_solve_text, _dump_solution(args, sol), workers=config.settings.workers)
    return ExitCode.ok


def cmd_reach(args: argparse.Namespace) -> int:
    config = _load(args)
    if config.x0 is None:
        raise ConfigError("initial_state", "required by reach")
    s = config.settings
    p = validate_problem(config.problem, s)
    sig = solve_sigma(p, s)
    phi = solve_target_odes(sig, p.target, p)
    t = p.grid.t_start
    state = reachability_solve(config.x0, sig, phi, t, tol=s.lsq_residual_tol)
    manifold = manifold_reachability_solve(p.manifold.F, p.manifold.b, sig, phi, t, tol=s.lsq_residual_tol)
    noise = generate_noise(s.seed, s.mc_paths, p.grid, workers=s.workers)
    check = gramian_riccati_check(sig, hat_coefficients(sig, p), noise, t, sigma_mult=s.mc_sigma_mult)
    margin = exact_controllability_margin(sig, t)
    report = {
        "command": "reach",
        "reachable": state.reachable,
        "xi": state.xi,
        "residual": state.residual,
        "margin": margin,
        "gramian_check": {
            "psi_hat": check.estimate.psi_hat,
            "sigma": check.sigma,
            "max_z_score": check.max_z_score,
            "se": check.estimate.se,
            "ok": check.ok,
        },
        "t": t,
        "initial_state": config.x0,
        "threshold": state.threshold,
        "exactly_controllable": margin > 0.0,
        "manifold": asdict(manifold),
        "settings": resolved_settings(s, p.grid),
    }
    files = [write_riccati_csv(Path(args.out) / "riccati.csv", sig, phi)] if args.dump_riccati else []
    _finish(args, report, _emit_reach_text, files, workers=s.workers)
    return ExitCode.ok if state.reachable else ExitCode.unreachable


def cmd_gramian(args: argparse.Namespace) -> int:
    config = _load(args)
    s = config.settings
    p = validate_problem(config.problem, s)
    sig = solve_sigma(p, s)
    hat = hat_coefficients(sig, p)
    noise = generate_noise(s.seed, s.mc_paths, p.grid, workers=s.workers)
    check = gramian_riccati_check(sig, hat, noise, p.grid.t_start, sigma_mult=s.mc_sigma_mult)
    report = {
        "command": "gramian",
        "t0": check.estimate.t0,
        "t1": check.estimate.t1,
        "paths": check.estimate.paths,
        "psi_hat": check.estimate.psi_hat,
        "se": check.estimate.se,
        "sigma": check.sigma,
        "z_scores": check.estimate.z_scores(check.sigma),
        "max_z_score": check.max_z_score,
        "ok": check.ok,
        "settings": resolved_settings(s, p.grid),
    }
    _finish(args, report, _emit_gramian_text, workers=s.workers)
    return ExitCode.ok


def cmd_transform(args: argparse.Namespace) -> int:
    config = _load(args)
    if config.raw_system is None or config.transform is None:
        raise ConfigError("raw_system", "required by transform")
    raw, tr = config.raw_system, config.transform
    eye = np.hstack([np.eye(raw.n), np.zeros((raw.n, raw.m - raw.n))])
    report: dict[str, Any] = {
        "command": "transform",
        "n": raw.n,
        "m": raw.m,
        "canonical_error": float(np.max(np.abs(raw.D.values @ tr.M.values - eye))),
        "max_cond_M": float(np.max(tr.cond_M)),
        "nondegeneracy_margin": float(np.min(np.linalg.eigvalsh(raw.D.values @ np.swapaxes(raw.D.values, 1, 2))[:, 0])),
        "M_start": tr.M[0],
        "Abar_start": tr.Abar[0],
        "K_start": tr.K[0],
        "L_start": tr.L[0],
    }
    if args.paths:
        s = config.settings
        noise = generate_noise(s.seed, s.mc_paths, tr.grid, workers=s.workers)
        report["raw_gramian"] = asdict(raw_gramian(tr, noise, tr.grid.t_start, tr.grid.t_end))
    report["settings"] = resolved_settings(config.settings, tr.grid)
    files = [write_transform_csv(Path(args.out) / "transform.csv", tr)] if args.out else []
    _finish(args, report, _emit_transform_text, files, workers=config.settings.workers)
    return ExitCode.ok


def cmd_verify(args: argparse.Namespace) -> int:
    config = _load(args)
    report = run_verify(config)
    _finish(args, report, _emit_verify_text, workers=config.settings.workers)
    return ExitCode.ok if report["score"] == "green" else ExitCode.numerical


def _unreachable(args: argparse.Namespace, e: TargetUnreachableFromManifold) -> int:
    print(f"error: {e}", file=sys.stderr)
    result = e.result
    if result is None:
        return ExitCode.unreachable
    print(f"residual: {result.residual:.17g} (threshold {result.threshold:.3g})", file=sys.stderr)
    print(f"minimal-norm lambda: {_fmt(result.lambda_star)}", file=sys.stderr)
    if args.out:
        report = {
            "command": args.cmd,
            "status": "unreachable",
            "lambda_star": result.lambda_star,
            "residual": result.residual,
            "multiplier": {
                "threshold": result.threshold,
                "s_matrix": result.s_matrix,
                "rhs": result.rhs,
            },
            "settings": getattr(args, "resolved_settings", None),
        }
        out = Path(args.out)
        path = write_report(out, args.cmd, report)
        write_metadata(out, args.cmd, started=args.started, workers=args.workers or 1, files=[path])
    return ExitCode.unreachable


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--out", help="Directory for the JSON report, metadata.json and CSV dumps")
    common.add_argument("--paths", type=int, help="Monte Carlo paths (overrides settings.mc_paths)")
    common.add_argument("--steps", type=int, help="Grid steps (overrides grid.steps)")
    common.add_argument("--seed", type=int, help="Noise seed (overrides settings.seed)")
    common.add_argument("--workers", type=int, help="Worker threads for path chunks")
    common.add_argument("--eps", type=float, help="Perturbation size for the optimality check")
    common.add_argument("--dump-riccati", action="store_true", help="Write riccati.csv (needs --out)")
    common.add_argument("--dump-trajectories", action="store_true", help="Write x/z/v/y.csv (needs --out)")
    common.add_argument("--json", action="store_true", help="Print the report as JSON")
    common.add_argument("--verbose", action="store_true", help="Log solver progress to stderr")
    return common


def main(argv: list[str] | None = None) -> int:
    common = _common_parser()
    p = argparse.ArgumentParser(prog="manifoldlq")
    sub = p.add_subparsers(dest="cmd", required=True)

    sub.add_parser("solve", parents=[common], help="Solve the constrained problem and simulate the optimal pair").set_defaults(func=cmd_solve)
    sub.add_parser("reach", parents=[common], help="Decide reachability of the target from initial_state").set_defaults(func=cmd_reach)
    sub.add_parser("gramian", parents=[common], help="Compare the Monte Carlo hat-system Gramian with Sigma(t)").set_defaults(func=cmd_gramian)
    sub.add_parser("transform", parents=[common], help="Map a raw system to canonical form").set_defaults(func=cmd_transform)
    sub.add_parser("transfer", parents=[common], help="Minimum-energy transfer from initial_state").set_defaults(func=cmd_transfer)
    sub.add_parser("verify", parents=[common], help="Run the invariant battery").set_defaults(func=cmd_verify)

    args = p.parse_args(argv)
    args.started = time.time()
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    try:
        return int(args.func(args))
    except TargetUnreachableFromManifold as e:
        return _unreachable(args, e)
    except ValidationError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return ExitCode.invalid_config
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return ExitCode.numerical


def run(command: str, config_path: str | Path, flags: Sequence[str] = ()) -> int:
    """Run one subcommand as the console script would."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    return main([command, "--config", str(config_path), *flags])


if __name__ == "__main__":
    raise SystemExit(main())
