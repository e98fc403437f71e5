"""Shared test utilities: finite differences and tiny fixtures."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FD_STEP = 1e-5
# entries below this magnitude are compared on an absolute scale
REL_FLOOR = 1e-4


def central_difference(f, x: np.ndarray, entries=None, h: float = FD_STEP) -> dict[int, float]:
    """Numeric d f / d x.flat[i] for the selected flat indices (all by default)."""
    idx = range(x.size) if entries is None else entries
    out = {}
    for i in idx:
        orig = x.flat[i]
        x.flat[i] = orig + h
        up = f()
        x.flat[i] = orig - h
        down = f()
        x.flat[i] = orig
        out[int(i)] = (up - down) / (2.0 * h)
    return out


def max_rel_error(analytic: np.ndarray, numeric: dict[int, float]) -> float:
    worst = 0.0
    for i, n in numeric.items():
        a = float(np.asarray(analytic).flat[i])
        worst = max(worst, abs(a - n) / max(abs(a), abs(n), REL_FLOOR))
    return worst


def write_jsonl(path: Path, rows) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return path


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)
