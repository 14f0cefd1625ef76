"""Plain-text persistence: field CSVs, atom-list CSVs, PBM masks, JSON."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .concentration import DiscreteMeasure


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_rows(path, rows: list, columns: list | None = None) -> Path:
    """CSV of dict rows; floats are written with full round-trip precision."""
    path = Path(path)
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def write_field_csv(path, values) -> Path:
    """Header ``n=<n>`` followed by ``n`` rows (index ``ix``) of ``n`` values."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ValueError("field must be a square array")
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"n={v.shape[0]}\n")
        for row in v:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    return path


def read_field_csv(path) -> np.ndarray:
    path = Path(path)
    with path.open() as fh:
        head = fh.readline().strip()
        if not head.startswith("n="):
            raise ValueError(f"{path}: missing 'n=<size>' header")
        n = int(head[2:])
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (n, n):
        raise ValueError(f"{path}: expected {n}x{n} values, got {data.shape}")
    return data


def write_measure_csv(path, mu: DiscreteMeasure) -> Path:
    rows = [{"x": p[0], "y": p[1], "mass": m} for p, m in zip(mu.points, mu.masses)]
    return write_rows(path, rows, ["x", "y", "mass"])


def read_measure_csv(path) -> DiscreteMeasure:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DiscreteMeasure(data[:, :2], data[:, 2])


def write_pbm(path, mask) -> Path:
    """Plain (P1) bitmap; row ``iy`` from the top, column ``ix``."""
    m = np.asarray(mask, dtype=bool).T[::-1]
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"P1\n{m.shape[1]} {m.shape[0]}\n")
        for row in m:
            fh.write(" ".join("1" if b else "0" for b in row) + "\n")
    return path


def read_pbm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P1":
        raise ValueError("only plain PBM (P1) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    bits = np.array([t == "1" for t in tokens[3:3 + w * h]]).reshape(h, w)
    return bits[::-1].T.copy()
