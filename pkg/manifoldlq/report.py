from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from manifoldlq.canonical import TransformResult
from manifoldlq.problem import SolverSettings, TimeGrid
from manifoldlq.riccati import PhiCoeffs, SigmaPath
from manifoldlq.solver import OptimalEnsemble


def resolved_settings(settings: SolverSettings, grid: TimeGrid) -> dict[str, Any]:
    """Settings and grid as embedded in reports. The worker count goes to metadata.json."""
    out = {k: v for k, v in settings.as_dict().items() if k != "workers"}
    out["grid"] = {"t_start": grid.t_start, "t_end": grid.t_end, "steps": grid.steps}
    return out


def format_float(value: float) -> str:
    return format(float(value), ".17g")


def to_jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return to_jsonable(value.item())
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def _encode(value: Any, level: int) -> str:
    pad = "  " * (level + 1)
    end = "  " * level
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_float(value) if math.isfinite(value) else "null"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, level + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in value):
            return "[" + ", ".join(_encode(v, level + 1) for v in value) + "]"
        items = [f"{pad}{_encode(v, level + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_report(report: Any) -> str:
    return _encode(to_jsonable(report), 0) + "\n"


def write_report(out_dir: Path, command: str, report: dict[str, Any]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}.json"
    path.write_text(dumps_report(report), encoding="utf-8")
    return path


def write_metadata(out_dir: Path, command: str, *, started: float, workers: int, files: Iterable[Path]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    finished = time.time()
    meta = {
        "command": command,
        "started_at_epoch_ms": int(started * 1000),
        "finished_at_epoch_ms": int(finished * 1000),
        "duration_ms": int((finished - started) * 1000),
        "workers": int(workers),
        "files": sorted(p.name for p in files),
    }
    path = out_dir / "metadata.json"
    path.write_text(dumps_report(meta), encoding="utf-8")
    return path


def _write_rows(path: Path, header: list[str], rows: Iterable[list[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(x) if isinstance(x, float) else x for x in row])
    return path


def write_riccati_csv(path: Path, sig: SigmaPath, phi: PhiCoeffs) -> Path:
    n = sig.n
    header = ["step", "time"]
    header += [f"sigma_{i}_{j}" for i in range(n) for j in range(n)]
    header += [f"a_{i}" for i in range(n)] + [f"bc_{i}" for i in range(n)]
    nodes = sig.grid.nodes
    rows = (
        [i, float(nodes[i])] + [float(x) for x in sig[i].ravel()] + [float(x) for x in phi.a[i]] + [float(x) for x in phi.bc[i]]
        for i in range(sig.grid.steps + 1)
    )
    return _write_rows(path, header, rows)


def write_trajectories(out_dir: Path, ens: OptimalEnsemble) -> list[Path]:
    nodes = ens.grid.nodes
    written = []
    for name, values in (("x", ens.x), ("z", ens.z), ("v", ens.v), ("y", ens.y)):
        header = ["path", "step", "time"] + [f"{name}_{i}" for i in range(values.shape[2])]
        rows = (
            [p, i, float(nodes[i])] + [float(x) for x in values[p, i]]
            for p in range(values.shape[0])
            for i in range(values.shape[1])
        )
        written.append(_write_rows(out_dir / f"{name}.csv", header, rows))
    return written


def write_transform_csv(path: Path, transform: TransformResult) -> Path:
    blocks = (("M", transform.M), ("Abar", transform.Abar), ("K", transform.K), ("L", transform.L))
    header = ["step", "time"]
    for name, coeff in blocks:
        header += [f"{name}_{i}_{j}" for i in range(coeff.rows) for j in range(coeff.cols)]
    header.append("cond_M")
    nodes = transform.grid.nodes
    rows = []
    for s in range(transform.grid.steps + 1):
        row: list[Any] = [s, float(nodes[s])]
        for _, coeff in blocks:
            row += [float(x) for x in coeff[s].ravel()]
        row.append(float(transform.cond_M[s]))
        rows.append(row)
    return _write_rows(path, header, rows)
