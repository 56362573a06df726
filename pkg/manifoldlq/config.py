from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from manifoldlq.canonical import RawSystem, TransformResult, to_canonical
from manifoldlq.errors import ConfigError
from manifoldlq.problem import (
    AffineTarget,
    CanonicalProblem,
    CoeffPath,
    Manifold,
    SolverSettings,
    TimeGrid,
    Weights,
)

# CLI flag -> settings field
OVERRIDE_FIELDS = {
    "paths": "mc_paths",
    "seed": "seed",
    "workers": "workers",
    "eps": "perturbation_eps",
}


def parse_run_config(text: str) -> dict[str, Any]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError("", "config must parse to a JSON object")
    return data


def load_run_config(path: str | Path) -> dict[str, Any]:
    fp = Path(path)
    try:
        text = fp.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("--config", f"cannot read {fp}: {e.strerror or e}") from e
    return parse_run_config(text)


def _section(raw: dict[str, Any], name: str, *, required: bool = True) -> dict[str, Any] | None:
    value = raw.get(name)
    if value is None:
        if required:
            raise ConfigError(name, "missing required block")
        return None
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a JSON object")
    return value


def _number(value: Any, field: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f"expected a number, got {type(value).__name__}")
    if not math.isfinite(value):
        raise ConfigError(field, "must be finite")
    return float(value)


def _integer(value: Any, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(field, f"expected an integer, got {value!r}")
    return int(value)


def _vector(value: Any, field: str, dim: int | None = None) -> np.ndarray:
    if isinstance(value, list):
        out = np.array([_number(x, f"{field}[{i}]") for i, x in enumerate(value)], dtype=float)
    else:
        out = np.array([_number(value, field)])
    if dim is not None and out.shape != (dim,):
        raise ConfigError(field, f"expected {dim} entries, got {out.shape[0]}")
    return out


def _matrix(value: Any, field: str) -> np.ndarray:
    if not isinstance(value, list):
        return np.array([[_number(value, field)]])
    if not value or not all(isinstance(row, list) for row in value):
        raise ConfigError(field, "matrix must be a number or a non-empty list of rows")
    rows = [[_number(x, f"{field}[{i}][{j}]") for j, x in enumerate(row)] for i, row in enumerate(value)]
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width or width == 0:
            raise ConfigError(f"{field}[{i}]", f"row has {len(row)} entries, expected {width}")
    return np.array(rows, dtype=float)


def _is_per_node(value: Any) -> bool:
    return (
        isinstance(value, list)
        and bool(value)
        and isinstance(value[0], list)
        and bool(value[0])
        and isinstance(value[0][0], list)
    )


def _coeff_path(value: Any, field: str, grid: TimeGrid, shape: tuple[int, int] | None = None) -> CoeffPath:
    if _is_per_node(value):
        if len(value) != grid.steps + 1:
            raise ConfigError(field, f"expected {grid.steps + 1} per-node matrices, got {len(value)}")
        mats = [_matrix(item, f"{field}[{i}]") for i, item in enumerate(value)]
        for i, mat in enumerate(mats):
            if mat.shape != mats[0].shape:
                raise ConfigError(f"{field}[{i}]", f"shape {mat.shape} differs from {mats[0].shape}")
        path = CoeffPath(np.stack(mats))
    else:
        path = CoeffPath.constant(_matrix(value, field), grid)
    if shape is not None and (path.rows, path.cols) != shape:
        raise ConfigError(field, f"expected a {shape[0]}x{shape[1]} matrix, got {path.rows}x{path.cols}")
    return path


def _grid(raw: dict[str, Any], steps_override: int | None) -> TimeGrid:
    block = _section(raw, "grid")
    assert block is not None
    t_start = _number(block.get("t_start", 0.0), "grid.t_start")
    if "t_end" not in block:
        raise ConfigError("grid.t_end", "missing required field")
    t_end = _number(block["t_end"], "grid.t_end")
    steps = steps_override if steps_override is not None else _integer(block.get("steps", 1000), "grid.steps")
    grid = TimeGrid(t_start, t_end, steps)
    grid.check()
    return grid


def _settings(raw: dict[str, Any], overrides: dict[str, Any]) -> SolverSettings:
    block = dict(_section(raw, "settings", required=False) or {})
    known = {f.name: f for f in fields(SolverSettings)}
    for key, value in block.items():
        if key not in known:
            raise ConfigError(f"settings.{key}", "unknown setting")
        if isinstance(getattr(SolverSettings(), key), int):
            _integer(value, f"settings.{key}")
        else:
            _number(value, f"settings.{key}")
    for flag, name in OVERRIDE_FIELDS.items():
        if overrides.get(flag) is not None:
            block[name] = overrides[flag]
    return SolverSettings.from_raw(block)


@dataclass(frozen=True, eq=False)
class RunConfig:
    problem: CanonicalProblem
    settings: SolverSettings
    x0: np.ndarray | None
    raw_system: RawSystem | None
    transform: TransformResult | None

    @staticmethod
    def from_raw(raw: dict[str, Any], overrides: dict[str, Any] | None = None) -> "RunConfig":
        overrides = overrides or {}
        steps = overrides.get("steps")
        grid = _grid(raw, int(steps) if steps is not None else None)
        settings = _settings(raw, overrides)

        system = _section(raw, "system", required=False)
        raw_block = _section(raw, "raw_system", required=False)
        if (system is None) == (raw_block is None):
            raise ConfigError("system", "exactly one of 'system' or 'raw_system' is required")

        raw_system: RawSystem | None = None
        transform: TransformResult | None = None
        if system is not None:
            for key in ("A", "L"):
                if key not in system:
                    raise ConfigError(f"system.{key}", "missing required matrix")
            A = _coeff_path(system["A"], "system.A", grid)
            n = A.rows
            if A.cols != n:
                raise ConfigError("system.A", f"expected a square matrix, got {n}x{A.cols}")
            K = _coeff_path(system["K"], "system.K", grid, (n, n)) if "K" in system else CoeffPath.zeros(n, n, grid)
            L = _coeff_path(system["L"], "system.L", grid)
            if L.rows != n:
                raise ConfigError("system.L", f"expected {n} rows, got {L.rows}")
        else:
            assert raw_block is not None
            for key in ("A", "B", "C", "D"):
                if key not in raw_block:
                    raise ConfigError(f"raw_system.{key}", "missing required matrix")
            A_raw = _coeff_path(raw_block["A"], "raw_system.A", grid)
            n = A_raw.rows
            if A_raw.cols != n:
                raise ConfigError("raw_system.A", f"expected a square matrix, got {n}x{A_raw.cols}")
            B = _coeff_path(raw_block["B"], "raw_system.B", grid)
            m = B.cols
            if B.rows != n:
                raise ConfigError("raw_system.B", f"expected {n} rows, got {B.rows}")
            raw_system = RawSystem(
                grid=grid,
                A=A_raw,
                B=B,
                C=_coeff_path(raw_block["C"], "raw_system.C", grid, (n, n)),
                D=_coeff_path(raw_block["D"], "raw_system.D", grid, (n, m)),
                delta_D=_number(raw_block.get("delta_D", 1e-8), "raw_system.delta_D"),
            )
            if m <= n:
                raise ConfigError("raw_system.B", f"control dimension m={m} must exceed n={n}")
            transform = to_canonical(raw_system)
            A, K, L = transform.Abar, transform.K, transform.L
        mn = L.cols

        weights_block = _section(raw, "weights")
        assert weights_block is not None
        if "N" not in weights_block:
            raise ConfigError("weights.N", "missing required matrix")
        N = _coeff_path(weights_block["N"], "weights.N", grid, (mn, mn))
        default_delta = float(np.min(np.linalg.eigvalsh(N.values)[:, 0]))
        weights = Weights(
            G=_matrix(weights_block.get("G", [[0.0] * n for _ in range(n)]), "weights.G"),
            Q=_coeff_path(weights_block["Q"], "weights.Q", grid, (n, n)) if "Q" in weights_block else CoeffPath.zeros(n, n, grid),
            R=_coeff_path(weights_block["R"], "weights.R", grid, (n, n)) if "R" in weights_block else CoeffPath.zeros(n, n, grid),
            N=N,
            delta=_number(weights_block.get("delta", default_delta), "weights.delta"),
        )

        manifold_block = _section(raw, "manifold")
        assert manifold_block is not None
        if "F" not in manifold_block:
            raise ConfigError("manifold.F", "missing required matrix")
        F = _matrix(manifold_block["F"], "manifold.F")
        if F.shape[1] != n:
            raise ConfigError("manifold.F", f"expected {n} columns, got {F.shape[1]}")
        b = _vector(manifold_block.get("b", [0.0] * F.shape[0]), "manifold.b", F.shape[0])

        target_block = _section(raw, "target")
        assert target_block is not None
        if "c0" not in target_block:
            raise ConfigError("target.c0", "missing required vector")
        target = AffineTarget(
            c0=_vector(target_block["c0"], "target.c0", n),
            c1=_vector(target_block.get("c1", [0.0] * n), "target.c1", n),
        )

        x0 = raw.get("initial_state")
        return RunConfig(
            problem=CanonicalProblem(
                grid=grid,
                A=A,
                K=K,
                L=L,
                weights=weights,
                manifold=Manifold(F=F, b=b),
                target=target,
            ),
            settings=settings,
            x0=None if x0 is None else _vector(x0, "initial_state", n),
            raw_system=raw_system,
            transform=transform,
        )
