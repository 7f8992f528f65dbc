"""Evaluation: PSNR, mIoU, panoptic quality, and scene-level panoptic quality.

Panoptic maps are (semantic, instance) image pairs: semantic uint8 with 255 =
void, instance ids meaningful on thing pixels (0 elsewhere).  A segment is a
stuff class or a (thing class, id) pair.  Frame-level PQ matches segments
within each frame and pools TP/FP/FN per class across frames; scene-level PQ
first pools each segment's pixels across all frames of the scene (ids must be
scene-consistent to survive this) and matches the pooled masks — equivalent
to running frame-level PQ on one big tiled image per scene.

Void conventions: ground-truth void pixels are excluded from IoU
denominators, and an unmatched prediction more than half covered by
ground-truth void is dropped rather than counted as a false positive.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import images
from .field import ClassTable

VOID = images.VOID_CLASS
PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB between images with values in [0, 1]."""
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


def miou(pred, gt, n_classes: int):
    """Mean intersection-over-union over classes present in the ground truth.

    ``pred`` and ``gt`` may be single label images or lists of them; pixels are
    pooled before the per-class IoU.  Ground-truth void pixels are excluded.
    Returns ``(mean, per_class)`` with NaN for classes absent from the GT.
    """
    p = _flatten_all(pred)
    g = _flatten_all(gt)
    keep = g != VOID
    p, g = p[keep], g[keep]
    per_class = np.full(n_classes, np.nan)
    for c in np.unique(g):
        inter = np.count_nonzero((p == c) & (g == c))
        union = np.count_nonzero((p == c) | (g == c))
        per_class[c] = inter / union if union else 0.0
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else 0.0
    return mean, per_class


def _flatten_all(maps) -> np.ndarray:
    if isinstance(maps, np.ndarray):
        return maps.ravel()
    return np.concatenate([m.ravel() for m in maps])


class PQStat:
    """Per-class TP/FP/FN counts and matched-IoU sums."""

    def __init__(self, n_classes: int):
        self.iou_sum = np.zeros(n_classes)
        self.tp = np.zeros(n_classes, dtype=int)
        self.fp = np.zeros(n_classes, dtype=int)
        self.fn = np.zeros(n_classes, dtype=int)

    def report(self, variant: str) -> dict:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        scored = denom > 0
        per_class = {}
        pqs, sqs, rqs = [], [], []
        for c in np.flatnonzero(scored):
            sq = self.iou_sum[c] / self.tp[c] if self.tp[c] else 0.0
            rq = self.tp[c] / denom[c]
            pq = self.iou_sum[c] / denom[c]
            per_class[str(int(c))] = {"pq": pq, "sq": sq, "rq": rq,
                                      "tp": int(self.tp[c]),
                                      "fp": int(self.fp[c]),
                                      "fn": int(self.fn[c])}
            pqs.append(pq)
            sqs.append(sq)
            rqs.append(rq)
        n = max(len(pqs), 1)
        return {"variant": variant, "pq": sum(pqs) / n, "sq": sum(sqs) / n,
                "rq": sum(rqs) / n, "n_classes_scored": len(pqs),
                "per_class": per_class}


def _segment_codes(sem: np.ndarray, inst: np.ndarray,
                   table: ClassTable) -> np.ndarray:
    """Pack each pixel's segment key into an int64: class << 16 | id.

    Stuff pixels ignore the id channel (one segment per stuff class); void
    pixels code to -1.
    """
    sem = sem.ravel().astype(np.int64)
    inst = inst.ravel().astype(np.int64)
    thing = np.zeros(256, dtype=bool)
    thing[table.thing_ids()] = True
    keep_id = thing[np.clip(sem, 0, 255)]
    code = (sem << 16) | np.where(keep_id, inst, 0)
    return np.where(sem == VOID, -1, code)


def pq_accumulate(pred_maps, gt_maps, table: ClassTable, stat: PQStat):
    """One segment-matching pass over pooled pixels; updates ``stat``.

    ``pred_maps``/``gt_maps`` are lists of (semantic, instance) pairs whose
    pixels are pooled — pass one frame for frame-level matching, a whole scene
    for scene-level matching.
    """
    pcode = np.concatenate([_segment_codes(s, i, table) for s, i in pred_maps])
    gcode = np.concatenate([_segment_codes(s, i, table) for s, i in gt_maps])

    pkeys, pidx, psize = np.unique(pcode, return_inverse=True,
                                   return_counts=True)
    gkeys, gidx, gsize = np.unique(gcode, return_inverse=True,
                                   return_counts=True)
    pair = pidx.astype(np.int64) * len(gkeys) + gidx
    pair_keys, pair_count = np.unique(pair, return_counts=True)
    pi = pair_keys // len(gkeys)
    gi = pair_keys % len(gkeys)

    in_void = gkeys[gi] == -1
    void_overlap = np.bincount(pi[in_void], weights=pair_count[in_void],
                               minlength=len(pkeys))

    matched_p = np.zeros(len(pkeys), dtype=bool)
    matched_g = np.zeros(len(gkeys), dtype=bool)
    for k in range(len(pair_keys)):
        p, g = pi[k], gi[k]
        if pkeys[p] == -1 or gkeys[g] == -1:
            continue
        if (pkeys[p] >> 16) != (gkeys[g] >> 16):
            continue
        inter = pair_count[k]
        union = psize[p] + gsize[g] - inter - void_overlap[p]
        iou = inter / union
        if iou > 0.5:
            c = int(pkeys[p] >> 16)
            stat.tp[c] += 1
            stat.iou_sum[c] += iou
            matched_p[p] = True
            matched_g[g] = True

    for p in np.flatnonzero(~matched_p):
        if pkeys[p] == -1:
            continue
        if void_overlap[p] / psize[p] > 0.5:
            continue  # mostly covers unlabeled ground truth: not a miss
        stat.fp[int(pkeys[p] >> 16)] += 1
    for g in np.flatnonzero(~matched_g):
        if gkeys[g] == -1:
            continue
        stat.fn[int(gkeys[g] >> 16)] += 1


def pq_frame(pred_frames, gt_frames, table: ClassTable) -> dict:
    """Standard PQ: match within each frame, pool counts across frames."""
    stat = PQStat(len(table.names))
    for pred, gt in zip(pred_frames, gt_frames, strict=True):
        pq_accumulate([pred], [gt], table, stat)
    return stat.report("frame-level")


def pq_scene(pred_frames, gt_frames, table: ClassTable) -> dict:
    """Scene-level PQ: pool each segment's pixels across all frames first."""
    stat = PQStat(len(table.names))
    pq_accumulate(pred_frames, gt_frames, table, stat)
    return stat.report("scene-level")


def evaluate_run(pred_dir: str, data_dir: str, split: str = "test") -> dict:
    """Compare a rendered output directory against dataset ground truth.

    Expects predictions named by frame index (``0007.png``) under ``rgb/``,
    ``sem/`` and ``inst/`` in ``pred_dir``; ground truth comes from the
    dataset's clean label channels.  Produces the aggregate report written by
    the eval command.
    """
    with open(os.path.join(data_dir, "meta.json")) as f:
        meta = json.load(f)
    table = ClassTable.from_json(meta["class_table"])
    frames = meta["split"][split]

    missing = [f"{i:04d}" for i in frames if not os.path.exists(
        os.path.join(pred_dir, "sem", f"{i:04d}.png"))]
    if missing:
        raise FileNotFoundError(
            f"predictions missing for frames: {', '.join(missing)}")

    psnrs = []
    pred_maps, gt_maps = [], []
    pred_rgb_dir = os.path.join(pred_dir, "rgb")
    for i in frames:
        stem = f"{i:04d}.png"
        if os.path.exists(os.path.join(pred_rgb_dir, stem)):
            psnrs.append(psnr(images.read_color(os.path.join(pred_rgb_dir, stem)),
                              images.read_color(os.path.join(data_dir, "rgb", stem))))
        pred_maps.append((images.read_semantic(os.path.join(pred_dir, "sem", stem)),
                          images.read_instance(os.path.join(pred_dir, "inst", stem))))
        gt_maps.append((images.read_semantic(os.path.join(data_dir, "sem_gt", stem)),
                        images.read_instance(os.path.join(data_dir, "inst_gt", stem))))

    mean_iou, per_class_iou = miou([p[0] for p in pred_maps],
                                   [g[0] for g in gt_maps], len(table.names))
    frame = pq_frame(pred_maps, gt_maps, table)
    scene = pq_scene(pred_maps, gt_maps, table)
    return {
        "split": split,
        "n_frames": len(frames),
        "psnr": float(np.mean(psnrs)) if psnrs else None,
        "miou": mean_iou,
        "iou_per_class": {str(c): float(v) for c, v in enumerate(per_class_iou)
                          if not np.isnan(v)},
        "pq": frame["pq"], "sq": frame["sq"], "rq": frame["rq"],
        "pq_scene": scene["pq"], "sq_scene": scene["sq"],
        "rq_scene": scene["rq"],
        "pq_detail": frame, "pq_scene_detail": scene,
    }
