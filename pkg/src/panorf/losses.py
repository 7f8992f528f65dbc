"""Training objectives over rendered rays.

Four terms, combined as
``L = w_ins * L_ins(R_I) + w_con * L_con(R_I) + w_rgb * L_rgb(R_S) + w_sem * L_sem(R_S)``:

- ``L_rgb``: mean squared color error over the random ray set.
- ``L_sem``: confidence-weighted cross-entropy between the rendered class
  distribution and the 2D label distribution.
- ``L_ins``: confidence-weighted negative log-likelihood of the surrogate
  identifier chosen for the ray's 2D instance by the per-image linear
  assignment.
- ``L_con``: segment consistency — every ray of one 2D panoptic segment is
  pulled toward the segment's current majority class (computed from detached
  rendered values, never differentiated through).

Void-labelled rays carry no class/instance/segment supervision and are
excluded from the corresponding sums *and* denominators; rays lacking an
instance id are likewise excluded from ``L_ins``.  Denominators count
participating rays, so scaling every confidence weight by c scales each
segmentation loss by exactly c.

Rendered distributions are used as-is (they sum to the ray opacity, not to
one).  The "unbounded field" ablation composites raw logits instead; in that
mode the losses apply a log-softmax along the class axis post hoc.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

EPS = 1e-8


@dataclass
class LossWeights:
    rgb: float = 1.0
    sem: float = 1.0
    ins: float = 1.0
    con: float = 1.35


def _zero() -> ad.Var:
    return ad.as_var(np.zeros((), dtype=np.float32))


def _log_prob(x: ad.Var, bounded: bool) -> ad.Var:
    """log of a rendered distribution, or log-softmax of rendered logits."""
    if bounded:
        return ad.log(ad.clamp_min(x, EPS))
    shift = ad.as_var(x.value.max(axis=-1, keepdims=True))
    z = ad.sub(x, shift)
    lse = ad.log(ad.reduce_sum(ad.exp(z), axis=-1, keepdims=True))
    return ad.sub(z, lse)


def loss_rgb(color: ad.Var, target: np.ndarray) -> ad.Var:
    """Mean over rays of the squared RGB error."""
    d = ad.sub(color, ad.as_var(target.astype(color.value.dtype)))
    return ad.mean(ad.reduce_sum(ad.mul(d, d), axis=1))


def loss_semantic(kappa: ad.Var, kappa_hat: np.ndarray, conf: np.ndarray,
                  valid: np.ndarray, bounded: bool = True) -> ad.Var:
    """Cross-entropy against per-ray label distributions, confidence-weighted."""
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        return _zero()
    logp = _log_prob(ad.take_rows(kappa, idx, unique=True), bounded)
    hat = kappa_hat[idx].astype(kappa.value.dtype)
    per_ray = ad.reduce_sum(ad.mul(ad.as_var(hat), logp), axis=1)
    w = conf[idx].astype(kappa.value.dtype)
    return ad.mul(ad.reduce_sum(ad.mul(ad.as_var(w), per_ray)), -1.0 / len(idx))


def loss_instance(pi: ad.Var, target_cols: np.ndarray, conf: np.ndarray,
                  bounded: bool = True) -> ad.Var:
    """Negative log-likelihood of each ray's assigned surrogate identifier.

    ``target_cols[r] = -1`` marks rays without an instance label; they do not
    count toward the mean.
    """
    idx = np.flatnonzero(target_cols >= 0)
    if len(idx) == 0:
        return _zero()
    logp = _log_prob(ad.take_rows(pi, idx, unique=True), bounded)
    picked = ad.take_per_row(logp, target_cols[idx])
    w = conf[idx].astype(pi.value.dtype)
    return ad.mul(ad.reduce_sum(ad.mul(ad.as_var(w), picked)), -1.0 / len(idx))


def segment_majority(kappa_values: np.ndarray, seg_ids: np.ndarray,
                     conf: np.ndarray, n_segments: int) -> np.ndarray:
    """Majority class per segment: argmax_k of the confidence-weighted sum of
    rendered class mass.  Operates on detached numpy values; ties resolve to
    the lowest class index."""
    k = kappa_values.shape[1]
    votes = np.zeros((n_segments, k))
    live = seg_ids >= 0
    np.add.at(votes, seg_ids[live], conf[live, None] * kappa_values[live])
    return votes.argmax(axis=1)


def loss_consistency(kappa: ad.Var, seg_ids: np.ndarray, conf: np.ndarray,
                     bounded: bool = True) -> ad.Var:
    """Pull every ray of a 2D segment toward the segment's majority class.

    The majority class is recomputed from the current (detached) rendered
    distributions each call; gradient flows only through the per-ray
    log-probability of that class.
    """
    idx = np.flatnonzero(seg_ids >= 0)
    if len(idx) == 0:
        return _zero()
    n_segments = int(seg_ids.max()) + 1
    majority = segment_majority(kappa.value, seg_ids, conf, n_segments)
    targets = majority[seg_ids[idx]]
    logp = _log_prob(ad.take_rows(kappa, idx, unique=True), bounded)
    picked = ad.take_per_row(logp, targets)
    w = conf[idx].astype(kappa.value.dtype)
    return ad.mul(ad.reduce_sum(ad.mul(ad.as_var(w), picked)), -1.0 / len(idx))


def combine(parts: dict[str, ad.Var], weights: LossWeights,
            use_consistency: bool = True) -> ad.Var:
    """Weighted total; the consistency term can be toggled off for ablation."""
    total = ad.mul(parts["rgb"], weights.rgb)
    total = ad.add(total, ad.mul(parts["sem"], weights.sem))
    total = ad.add(total, ad.mul(parts["ins"], weights.ins))
    if use_consistency:
        total = ad.add(total, ad.mul(parts["con"], weights.con))
    return total
