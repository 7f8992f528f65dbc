"""Matching 2D instance segments to surrogate identifiers.

Each training image carries machine-generated instance segments whose ids are
not stable across frames.  Before the instance loss can be applied, every
segment in the image must be matched one-to-one with one of the field's J
surrogate identifier slots.  The match maximizes the total rendered
probability mass: score[h, j] is the mean, over the rays of segment h, of the
rendered surrogate distribution's j-th entry (detached values).

Among all assignments of maximal total score, the one whose column sequence
(h = 0, 1, ...) is lexicographically smallest is returned, which makes the
result independent of solver internals and reproducible across runs.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

# Two totals within this relative tolerance count as equal when hunting for
# the lexicographically smallest optimum.
_TIE_TOL = 1e-9


def instance_scores(pi_values: np.ndarray, inst_ids: np.ndarray):
    """Build the segment-by-slot score matrix for one image.

    Parameters
    ----------
    pi_values: (B, J) detached rendered surrogate distributions.
    inst_ids: (B,) per-ray 2D instance ids, -1 where undefined.

    Returns ``(scores, ids)`` where ``scores[h]`` is the mean of ``pi_values``
    over the rays of the h-th distinct id (ordered by first appearance in the
    ray batch) and ``ids[h]`` is that id.
    """
    live = inst_ids >= 0
    ids, first, inverse = np.unique(inst_ids[live], return_index=True,
                                    return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    rows = rank[inverse]
    scores = np.zeros((len(ids), pi_values.shape[1]))
    np.add.at(scores, rows, pi_values[live])
    counts = np.bincount(rows, minlength=len(ids)).astype(float)
    scores /= counts[:, None]
    return scores, ids[order]


def _optimal_total(scores: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return float(scores[rows, cols].sum())


def solve_assignment(scores: np.ndarray) -> np.ndarray:
    """Maximum-score one-to-one assignment of rows to columns.

    Returns an (H,) array of column indices.  Requires H <= J; with more
    segments than identifier slots no injective match exists.  Ties between
    equally scoring assignments break toward the lexicographically smallest
    column sequence.
    """
    scores = np.asarray(scores, dtype=float)
    n_rows, n_cols = scores.shape
    if n_rows > n_cols:
        raise ValueError(
            f"{n_rows} segments cannot be matched injectively to "
            f"{n_cols} identifier slots")
    if n_rows == 0:
        return np.zeros(0, dtype=int)

    best = _optimal_total(scores)
    tol = _TIE_TOL * max(1.0, abs(best))
    assigned = np.full(n_rows, -1, dtype=int)
    free = np.ones(n_cols, dtype=bool)
    prefix = 0.0
    for h in range(n_rows):
        rest_rows = np.arange(h + 1, n_rows)
        for j in np.flatnonzero(free):
            rest_cols = np.flatnonzero(free & (np.arange(n_cols) != j))
            if len(rest_rows) > len(rest_cols):
                continue
            total = prefix + scores[h, j]
            if len(rest_rows):
                total += _optimal_total(scores[np.ix_(rest_rows, rest_cols)])
            if total >= best - tol:
                assigned[h] = j
                free[j] = False
                prefix += scores[h, j]
                break
        if assigned[h] < 0:  # unreachable: an optimal completion always exists
            raise RuntimeError("assignment refinement failed")
    return assigned
