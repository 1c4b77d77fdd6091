"""CSV and JSON formats for supports, measures, fitted dictionaries and reports.

Floats are written with ``repr`` (shortest round-trip form), so reading a file
back reproduces the in-memory values exactly. Nothing time-dependent is ever
written, which keeps repeated seeded runs byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import SupportModel, build_support


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return "" if value is None else str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_rows(path, rows, fieldnames=None) -> Path:
    """Write a list of dicts as CSV; columns default to first-seen key order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for row in rows:
            w.writerow([fmt(row.get(k)) for k in fieldnames])
    return path


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_matrix(path, matrix, prefix: str = "c") -> Path:
    M = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    names = [f"{prefix}{j}" for j in range(M.shape[1])]
    return write_rows(path, [dict(zip(names, row)) for row in M], names)


def read_matrix(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(v) for v in row] for row in reader if row], dtype=np.float64)


def write_vector(path, values, name: str = "value") -> Path:
    return write_rows(path, [{"index": i, name: float(v)} for i, v in enumerate(values)], ["index", name])


def read_vector(path, name: str = "value") -> np.ndarray:
    return np.array([float(r[name]) for r in read_rows(path)])


# supports and measures ------------------------------------------------------


def write_support(path, support: SupportModel) -> Path:
    return write_matrix(path, support.points, prefix="x")


def read_support(path, epsilon: float | None = None) -> SupportModel:
    return build_support(read_matrix(path), epsilon)


def write_measures(path, weights) -> Path:
    """One measure per row, one column per support point."""
    return write_matrix(path, weights, prefix="w")


def read_measures(path) -> np.ndarray:
    return read_matrix(path)


# fitted dictionaries --------------------------------------------------------


def save_fit(result, out_dir, config=None) -> dict:
    """Write atoms, coefficients, loss trace and diagnostics; returns the paths."""
    out = Path(out_dir)
    paths = {
        "atoms": write_matrix(out / "atoms.csv", result.dictionary, prefix="w"),
        "coefficients": write_matrix(out / "coefficients.csv", result.coefficients, prefix="lam"),
        "loss_trace": write_vector(out / "loss_trace.csv", result.loss_trace, name="loss"),
        "diagnostics": write_json(out / "diagnostics.json", {"events": result.diagnostics.events}),
    }
    if config is not None:
        paths["config"] = write_json(out / "config.json", config.to_dict())
    return paths


def load_fit_arrays(out_dir) -> dict:
    out = Path(out_dir)
    return {
        "atoms": read_matrix(out / "atoms.csv"),
        "coefficients": read_matrix(out / "coefficients.csv"),
        "loss_trace": read_vector(out / "loss_trace.csv", name="loss"),
    }


def read_labels(path) -> list[str]:
    """Single-column label file (header ``label``)."""
    return [r["label"] for r in read_rows(path)]


def write_labels(path, labels) -> Path:
    return write_rows(path, [{"label": lab} for lab in labels], ["label"])
