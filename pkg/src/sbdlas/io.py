"""CSV and JSON persistence for run artifacts."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def export_field(values, anchors, path) -> Path:
    """Write ``x1,x2,value`` rows in anchor order.

    Floats are written with ``repr`` so reading back is bit-exact.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anchors.shape != (values.size, 2):
        raise ValueError(f"{values.size} values for {anchors.shape[0]} anchors")
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "value"])
            for (x1, x2), v in zip(anchors, values):
                w.writerow([repr(float(x1)), repr(float(x2)), repr(float(v))])
    except OSError as exc:
        raise OSError(f"cannot write field to {path}: {exc}") from exc
    return path


def read_field(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`export_field`: returns (anchors, values)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    anchors = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
    values = np.array([float(r["value"]) for r in rows])
    return anchors, values


def write_table(path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(c) for c in row])
    return path


def read_table(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _cell(c):
    if isinstance(c, (float, np.floating)):
        return repr(float(c))
    if isinstance(c, np.integer):
        return int(c)
    return "" if c is None else c


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())
