"""Fusing candidate panoptic predictions of one image.

A candidate is a set of segments, each a soft mask in [0,1] paired with a
class distribution.  Segments from all candidates are pooled, clustered by
soft-IoU connected components, and each cluster is averaged into a single
(mask, distribution) pair.  Pixels are then assigned to the cluster whose
confidence-scaled mask wins, yielding one panoptic segmentation with
per-pixel confidences.

The whole procedure is deterministic and invariant to candidate order, and
fusing K copies of the same candidate set equals fusing it once, exactly:
segments are deduplicated by content before averaging, cluster members are
summed in content order, and every tie-break is content-based.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import images
from .field import ClassTable

THETA_DEFAULT = 0.5
TAU_FUSE = 0.25
VOID_SEG = 65535  # segment-map marker for unassigned pixels


@dataclass
class Segment:
    """One candidate segment: soft mask at image resolution + class distribution."""
    mask: np.ndarray  # (H, W) float in [0, 1]
    dist: np.ndarray  # (C,) sums to 1

    def validate(self):
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ValueError("segment mask values must lie in [0, 1]")
        if abs(self.dist.sum() - 1.0) > 1e-3:
            raise ValueError("segment class distribution must sum to 1")


@dataclass
class FusedImage:
    """Fusion result in the dataset label format plus the cluster table."""
    semantic: np.ndarray    # (H, W) uint8, 255 = void
    instance: np.ndarray    # (H, W) uint16, thing segments numbered from 1, 0 elsewhere
    confidence: np.ndarray  # (H, W) float32 in [0, 1]
    segment_map: np.ndarray  # (H, W) uint16 winning-cluster index, VOID_SEG = void
    dists: np.ndarray       # (n_clusters, C) averaged class distributions


def soft_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Σ min / Σ max of two soft masks; all-zero pair counts as disjoint."""
    union = np.minimum(a, b).sum(), np.maximum(a, b).sum()
    if union[1] == 0:
        return 0.0
    return float(union[0] / union[1])


def cluster_segments(segments: list[Segment], theta: float = THETA_DEFAULT):
    """Connected components of the graph with an edge where soft-IoU >= theta.

    Returns a list of clusters, each a list of indices into ``segments``,
    ordered by smallest member index.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"matching threshold must lie in (0, 1], got {theta}")
    n = len(segments)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if soft_iou(segments[i].mask, segments[j].mask) >= theta:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [groups[r] for r in sorted(groups)]


def _content_key(seg: Segment) -> bytes:
    return seg.mask.astype("<f8").tobytes() + seg.dist.astype("<f8").tobytes()


def aggregate_cluster(members: list[Segment]) -> Segment:
    """Arithmetic mean of member masks and distributions.

    Duplicated members are collapsed to multiplicity weights and the weighted
    sum runs in content order, so the result is bit-for-bit independent of
    member order and of whole-set duplication.
    """
    unique: dict[bytes, list] = {}
    for seg in members:
        entry = unique.setdefault(_content_key(seg), [seg, 0])
        entry[1] += 1
    total = float(len(members))
    mask = None
    dist = None
    for key in sorted(unique):
        seg, count = unique[key]
        w = count / total
        if mask is None:
            mask, dist = w * seg.mask, w * seg.dist
        else:
            mask = mask + w * seg.mask
            dist = dist + w * seg.dist
    return Segment(mask=mask, dist=dist)


def fuse(candidates: list[list[Segment]], table: ClassTable,
         theta: float = THETA_DEFAULT, tau: float = TAU_FUSE,
         shape: tuple[int, int] | None = None) -> FusedImage:
    """Full fusion: pool → cluster → average → confidence-scaled pixel argmax.

    Per cluster the winning class is the argmax of the averaged distribution
    (ties to the lowest class) and the averaged mask is scaled by that class
    probability.  Each pixel goes to the cluster with the highest scaled mask
    value; a winning value below ``tau`` leaves the pixel void with
    confidence 0.  Thing clusters become instances numbered from 1; clusters
    sharing a stuff class merge into one region in the output labels.

    With no segments at all the result is an all-void image, which needs an
    explicit ``shape``.
    """
    pool = [seg for cand in candidates for seg in pool_validate(cand)]
    if not pool:
        if shape is None:
            raise ValueError("no segments to fuse and no image shape given")
        h, w = shape
        return FusedImage(
            semantic=np.full((h, w), images.VOID_CLASS, dtype=np.uint8),
            instance=np.zeros((h, w), dtype=np.uint16),
            confidence=np.zeros((h, w), dtype=np.float32),
            segment_map=np.full((h, w), VOID_SEG, dtype=np.uint16),
            dists=np.zeros((0, len(table.names))))
    h, w = pool[0].mask.shape
    for seg in pool:
        if seg.mask.shape != (h, w):
            raise ValueError("candidate masks disagree on image resolution")

    clusters = cluster_segments(pool, theta)
    fused = [aggregate_cluster([pool[i] for i in c]) for c in clusters]

    classes = np.array([int(np.argmax(s.dist)) for s in fused])
    peaks = np.array([s.dist[c] for s, c in zip(fused, classes)])
    scaled = np.stack([p * s.mask for p, s in zip(peaks, fused)])
    mass = scaled.reshape(len(fused), -1).sum(axis=1)

    # canonical cluster order: strongest first, then class, size, content
    order = sorted(range(len(fused)),
                   key=lambda i: (-peaks[i], classes[i], -mass[i],
                                  scaled[i].astype("<f8").tobytes()))
    classes, scaled = classes[order], scaled[order]
    dists = np.stack([fused[i].dist for i in order])

    winner = scaled.argmax(axis=0)
    conf = np.take_along_axis(scaled, winner[None], axis=0)[0]
    void = conf < tau

    semantic = classes[winner].astype(np.uint8)
    semantic[void] = images.VOID_CLASS
    conf = np.where(void, 0.0, conf).astype(np.float32)

    segment_map = winner.astype(np.uint16)
    segment_map[void] = VOID_SEG

    # things keep one id per cluster; same-class stuff clusters share a region
    instance = np.zeros((h, w), dtype=np.uint16)
    next_id = 1
    for k, c in enumerate(classes):
        if table.is_thing(int(c)):
            instance[(winner == k) & ~void] = next_id
            next_id += 1
    return FusedImage(semantic=semantic, instance=instance, confidence=conf,
                      segment_map=segment_map, dists=dists)


def pool_validate(candidate: list[Segment]) -> list[Segment]:
    for seg in candidate:
        seg.validate()
    return candidate


# --- candidate-set files -------------------------------------------------
#
# One directory per image: manifest.json lists, per candidate, its segments
# as {"mask": <16-bit png filename>, "dist": [floats]}.

def write_candidates(dirpath: str, candidates: list[list[Segment]],
                     table: ClassTable):
    os.makedirs(dirpath, exist_ok=True)
    manifest = {"n_candidates": len(candidates), "classes": list(table.names),
                "candidates": []}
    for ci, cand in enumerate(candidates):
        entries = []
        for si, seg in enumerate(cand):
            name = f"c{ci:02d}_s{si:03d}.png"
            images.write_mask16(os.path.join(dirpath, name), seg.mask)
            entries.append({"mask": name, "dist": [float(v) for v in seg.dist]})
        manifest["candidates"].append(entries)
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_candidates(dirpath: str):
    with open(os.path.join(dirpath, "manifest.json")) as f:
        manifest = json.load(f)
    candidates = []
    for entries in manifest["candidates"]:
        cand = []
        for e in entries:
            mask = images.read_mask16(os.path.join(dirpath, e["mask"]))
            cand.append(Segment(mask=mask, dist=np.array(e["dist"])))
        candidates.append(cand)
    return candidates, manifest["classes"]


def write_fused(dirpath: str, stem: str, fused: FusedImage):
    """Write a fusion result in the dataset label format (+ distribution file)."""
    for sub in ("sem", "inst", "conf", "dist"):
        os.makedirs(os.path.join(dirpath, sub), exist_ok=True)
    images.write_semantic(os.path.join(dirpath, "sem", stem + ".png"),
                          fused.semantic)
    images.write_instance(os.path.join(dirpath, "inst", stem + ".png"),
                          fused.instance)
    images.write_confidence(os.path.join(dirpath, "conf", stem + ".png"),
                            fused.confidence)
    np.savez(os.path.join(dirpath, "dist", stem + ".npz"),
             dists=fused.dists, seg=fused.segment_map)
