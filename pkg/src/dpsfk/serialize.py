"""Deterministic CSV/JSON writers and checksums."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .sde import Ensemble

__all__ = ["write_csv", "read_csv", "write_json", "sha256_file", "ensemble_columns", "write_ensemble"]

FLOAT_FMT = "%.17g"


def write_csv(path, columns: dict[str, np.ndarray]) -> Path:
    """Write equal-length columns with 17 significant digits; returns the path."""
    path = Path(path)
    names = list(columns)
    cols = [np.asarray(columns[k]).ravel() for k in names]
    n = {c.size for c in cols}
    if len(n) > 1:
        raise ValueError("columns differ in length")
    ints = [np.issubdtype(c.dtype, np.integer) or c.dtype == bool for c in cols]
    with path.open("w", newline="\n") as f:
        f.write(",".join(names) + "\n")
        for row in zip(*cols):
            f.write(",".join(str(int(v)) if is_int else FLOAT_FMT % v for v, is_int in zip(row, ints)) + "\n")
    return path


def read_csv(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with path.open() as f:
        names = f.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {k: data[:, j] for j, k in enumerate(names)}


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default, allow_nan=True) + "\n")
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ensemble_columns(ens: Ensemble) -> dict[str, np.ndarray]:
    """Columnar view of an ensemble.

    With recorded states there is one row per (path, step) over the ``N+1``
    sampling-order states; per-step records are attached to the state they
    produce (step 0 rows carry NaN).  Without states one row per path.
    """
    d = ens.terminal.shape[1]
    if ens.states is None:
        cols = {"path_id": np.arange(ens.n_paths)}
        cols.update({f"x{k + 1}": ens.terminal[:, k] for k in range(d)})
        cols["diverged"] = ens.diverged.astype(int)
        return cols
    n, m, _ = ens.states.shape
    cols = {
        "path_id": np.repeat(np.arange(n), m),
        "step": np.tile(np.arange(m), n),
        "t": np.tile(ens.times, n),
    }
    cols.update({f"x{k + 1}": ens.states[:, :, k].ravel() for k in range(d)})
    for name, rec in ens.records.items():
        rec = np.asarray(rec, dtype=float)
        pad = np.full((n, 1) + rec.shape[2:], np.nan)
        full = np.concatenate([pad, rec], axis=1)
        if full.ndim == 2:
            cols[name] = full.ravel()
        else:
            for k in range(full.shape[2]):
                cols[f"{name}_{k + 1}"] = full[:, :, k].ravel()
    div = ens.diverged_step
    cols["diverged"] = (np.arange(m)[None, :] >= np.where(div >= 0, div, m)[:, None]).astype(int).ravel()
    return cols


def write_ensemble(path, ens: Ensemble) -> Path:
    return write_csv(path, ensemble_columns(ens))
