"""Shared test oracles: every [DERIVED] expectation in the suite is produced
by one of these independent implementations, never by the code under test."""

from __future__ import annotations

import itertools

import numpy as np


def finite_difference(fn, arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients of a scalar function of named arrays.

    ``fn`` receives a dict of float64 arrays and returns a python float. Each
    element is perturbed by ±h independently.
    """
    grads = {}
    for name, base in arrays.items():
        base = base.astype(np.float64)
        g = np.zeros_like(base)
        flat = base.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn({**arrays, name: base})
            flat[i] = orig - h
            down = fn({**arrays, name: base})
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-level relative disagreement between two gradient tensors."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def brute_force_assignment(scores: np.ndarray) -> tuple[np.ndarray, float]:
    """Enumerate every injective row->column map; return the lexicographically
    smallest optimal one.  Exponential — only for small score matrices."""
    n_rows, n_cols = scores.shape
    best_cols = None
    best_total = -np.inf
    for cols in itertools.permutations(range(n_cols), n_rows):
        total = sum(scores[i, c] for i, c in enumerate(cols))
        if total > best_total + 1e-12 or (
            abs(total - best_total) <= 1e-12 and (best_cols is None or cols < best_cols)
        ):
            best_total = total
            best_cols = cols
    return np.array(best_cols), float(best_total)


def trilinear_sample(dense: np.ndarray, pts01: np.ndarray) -> np.ndarray:
    """Reference trilinear interpolation of a dense (R, R, R) grid at [0,1]^3
    points, fully independent of the production gather code."""
    r = dense.shape[0]
    out = np.zeros(len(pts01))
    for n, p in enumerate(pts01):
        u = np.clip(p, 0.0, 1.0) * (r - 1)
        i = np.minimum(u.astype(int), r - 2)
        f = u - i
        acc = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((f[0] if dx else 1 - f[0])
                         * (f[1] if dy else 1 - f[1])
                         * (f[2] if dz else 1 - f[2]))
                    acc += w * dense[i[0] + dx, i[1] + dy, i[2] + dz]
        out[n] = acc
    return out


def tile_frames(frames: list[np.ndarray], pad_value) -> np.ndarray:
    """Lay frames side by side with a 1-pixel pad column of ``pad_value``
    between them (pad keeps segments from touching across frame borders)."""
    h = frames[0].shape[0]
    pad = np.full((h, 1) + frames[0].shape[2:], pad_value, dtype=frames[0].dtype)
    parts = []
    for i, f in enumerate(frames):
        if i:
            parts.append(pad)
        parts.append(f)
    return np.concatenate(parts, axis=1)
