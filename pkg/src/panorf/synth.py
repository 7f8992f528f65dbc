"""Synthetic room scenes with exact panoptic ground truth.

A scene is a closed room (floor, ceiling, four walls) containing a handful of
opaque primitives — spheres and boxes — each carrying an albedo, a semantic
class and, for thing classes, a scene-level instance id.  Images are rendered
by analytic first-hit ray casting with a fixed Lambertian light, so ground
truth color, depth, semantics and instances are exact and the same object
keeps the same id in every frame.

A corruption model then degrades the labels (never the colors) the way a 2D
segmentation network would: whole segments get flipped to a confusable class,
void holes appear, boundaries jitter, instance ids are re-rolled per frame,
and confidences are either calibrated or spuriously high.  The same machinery
can emit K independently corrupted soft-mask candidates per image for fusion.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from . import fusion, images
from .field import ClassTable
from .rendering import camera_rays

CLASS_TABLE = ClassTable(
    names=("wall", "floor", "ceiling", "cabinet", "table",
           "chair", "sofa", "bed", "television"),
    thing=(False, False, False, False, False, True, True, True, True))

# fixed confusable-class map used by label flips
CONFUSION = {0: 2, 1: 0, 2: 0, 3: 5, 4: 8, 5: 3, 6: 7, 7: 6, 8: 4}

_LIGHT = np.array([0.25, 0.15, 0.95])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

_THING_PALETTE = np.array([
    [0.85, 0.30, 0.25], [0.25, 0.55, 0.85], [0.30, 0.75, 0.35],
    [0.90, 0.65, 0.20], [0.60, 0.35, 0.75], [0.20, 0.70, 0.70],
    [0.85, 0.45, 0.65], [0.55, 0.60, 0.25], [0.40, 0.40, 0.85],
    [0.75, 0.55, 0.40],
])


@dataclass
class Primitive:
    kind: str               # "sphere" | "box"
    center: np.ndarray      # (3,)
    size: np.ndarray        # radius (scalar in [0]) or half-extents (3,)
    albedo: np.ndarray      # (3,)
    class_id: int
    instance_id: int        # 0 for stuff


@dataclass
class SyntheticScene:
    bounds: np.ndarray      # (2, 3) lo / hi
    primitives: list[Primitive]
    seed: int

    def thing_count(self) -> int:
        return sum(1 for p in self.primitives if p.instance_id > 0)


@dataclass
class CorruptionConfig:
    flip_rate: float = 0.0        # per segment per frame
    hole_rate: float = 0.0        # per segment: chance of a void hole
    hole_size: float = 0.35       # hole side, as a fraction of the segment bbox
    jitter: int = 0               # boundary shift amplitude in pixels
    morph_radius: int = 0         # random per-segment erosion/dilation
    permute_ids: bool = False     # re-roll instance ids every frame
    overconfident: bool = True    # Fig-3-style confidences vs calibrated
    candidates: int = 0           # K > 0: also emit candidate sets per frame
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_rate", "hole_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


ROOM_LO = np.array([-3.0, -3.0, 0.0])
ROOM_HI = np.array([3.0, 3.0, 2.5])
_SLAB = 0.2


def _room_shell() -> list[Primitive]:
    lo, hi, s = ROOM_LO, ROOM_HI, _SLAB
    grey = np.array([0.72, 0.70, 0.66])
    specs = [
        ("floor", 1, [0, 0, lo[2] + s / 2], [hi[0], hi[1], s / 2],
         [0.45, 0.33, 0.22]),
        ("ceiling", 2, [0, 0, hi[2] - s / 2], [hi[0], hi[1], s / 2],
         [0.88, 0.88, 0.86]),
        ("wall", 0, [lo[0] + s / 2, 0, hi[2] / 2], [s / 2, hi[1], hi[2] / 2],
         grey),
        ("wall", 0, [hi[0] - s / 2, 0, hi[2] / 2], [s / 2, hi[1], hi[2] / 2],
         grey * 0.96),
        ("wall", 0, [0, lo[1] + s / 2, hi[2] / 2], [hi[0], s / 2, hi[2] / 2],
         grey * 1.04),
        ("wall", 0, [0, hi[1] - s / 2, hi[2] / 2], [hi[0], s / 2, hi[2] / 2],
         grey * 0.92),
    ]
    return [Primitive(kind="box", center=np.array(c, float),
                      size=np.array(h, float), albedo=np.clip(np.array(a), 0, 1),
                      class_id=cid, instance_id=0)
            for _, cid, c, h, a in specs]


def generate_scene(seed: int, n_things: tuple[int, int] = (3, 10)
                   ) -> SyntheticScene:
    """Deterministic room with 3-10 thing objects and 3-4 stuff regions."""
    rng = np.random.default_rng(seed)
    prims = _room_shell()

    if rng.random() < 0.5:  # sometimes a large stuff slab ("table" surface)
        half = np.array([rng.uniform(0.7, 1.1), rng.uniform(0.5, 0.9), 0.05])
        center = np.array([rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2),
                           _SLAB + rng.uniform(0.4, 0.7)])
        prims.append(Primitive(kind="box", center=center, size=half,
                               albedo=np.array([0.55, 0.42, 0.28]),
                               class_id=4, instance_id=0))

    thing_classes = CLASS_TABLE.thing_ids()
    n = int(rng.integers(n_things[0], n_things[1] + 1))
    placed: list[tuple[np.ndarray, float]] = []
    for i in range(n):
        for _ in range(40):  # rejection sampling against overlaps
            radius = float(rng.uniform(0.25, 0.5))
            center = np.array([rng.uniform(-2.1, 2.1), rng.uniform(-2.1, 2.1),
                               _SLAB + radius * rng.uniform(1.0, 2.2)])
            if all(np.linalg.norm(center - c) > radius + r + 0.05
                   for c, r in placed):
                break
        placed.append((center, radius))
        kind = "sphere" if rng.random() < 0.6 else "box"
        size = (np.array([radius, 0, 0]) if kind == "sphere"
                else radius * np.array([1.0, rng.uniform(0.6, 1.4),
                                        rng.uniform(0.6, 1.4)]))
        prims.append(Primitive(
            kind=kind, center=center, size=size,
            albedo=_THING_PALETTE[i % len(_THING_PALETTE)].copy(),
            class_id=int(rng.choice(thing_classes)),
            instance_id=i + 1))
    return SyntheticScene(bounds=np.stack([ROOM_LO, ROOM_HI]),
                          primitives=prims, seed=seed)


# --- analytic first-hit rendering -------------------------------------------

def _hit_sphere(o, d, center, radius):
    oc = o - center
    b = np.einsum("ij,ij->i", oc, d)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - radius * radius)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-4, t0, t1)
    return np.where(hit & (t > 1e-4), t, np.inf)


def _hit_box(o, d, center, half):
    lo, hi = center - half, center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    # axis-parallel rays hit iff the origin lies inside the slab
    inside = (o >= lo) & (o <= hi)
    zero = d == 0
    ta = np.where(zero, np.where(inside, -np.inf, np.inf), ta)
    tb = np.where(zero, np.where(inside, np.inf, -np.inf), tb)
    t_lo = np.minimum(ta, tb).max(axis=1)
    t_hi = np.maximum(ta, tb).min(axis=1)
    t = np.where(t_lo > 1e-4, t_lo, t_hi)
    return np.where((t_hi >= np.maximum(t_lo, 1e-4)) & (t > 1e-4), t, np.inf)


def _box_normal(p, center, half):
    q = (p - center) / half
    axis = np.abs(q).argmax(axis=1)
    n = np.zeros_like(p)
    rows = np.arange(len(p))
    n[rows, axis] = np.sign(q[rows, axis])
    return n


def analytic_render(scene: SyntheticScene, c2w: np.ndarray, intrinsics: dict,
                    height: int, width: int):
    """Exact first-hit images: returns (rgb, depth, semantic, instance)."""
    origins, dirs = camera_rays(c2w, intrinsics, height, width)
    origins = origins.astype(float)
    dirs = dirs.astype(float)
    n = len(origins)

    ts = np.full((len(scene.primitives), n), np.inf)
    for k, prim in enumerate(scene.primitives):
        if prim.kind == "sphere":
            ts[k] = _hit_sphere(origins, dirs, prim.center, prim.size[0])
        else:
            ts[k] = _hit_box(origins, dirs, prim.center, prim.size)

    best = ts.argmin(axis=0)
    t = ts[best, np.arange(n)]
    hit = np.isfinite(t)

    rgb = np.zeros((n, 3))
    sem = np.full(n, images.VOID_CLASS, dtype=np.uint8)
    inst = np.zeros(n, dtype=np.uint16)
    for k, prim in enumerate(scene.primitives):
        sel = hit & (best == k)
        if not sel.any():
            continue
        p = origins[sel] + t[sel, None] * dirs[sel]
        if prim.kind == "sphere":
            normal = (p - prim.center) / prim.size[0]
        else:
            normal = _box_normal(p, prim.center, prim.size)
        shade = 0.35 + 0.65 * np.maximum(0.0, normal @ _LIGHT)
        rgb[sel] = prim.albedo * shade[:, None]
        sem[sel] = prim.class_id
        inst[sel] = prim.instance_id

    depth = np.where(hit, t, 0.0)
    shape = (height, width)
    return (rgb.reshape(*shape, 3).astype(np.float32),
            depth.reshape(shape).astype(np.float32),
            sem.reshape(shape), inst.reshape(shape))


def orbit_poses(n_frames: int, seed: int) -> list[np.ndarray]:
    """Inward-facing orbit inside the room, elevation jittered per frame."""
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n_frames):
        angle = 2.0 * np.pi * i / n_frames
        radius = 2.05 + 0.25 * rng.random()
        eye = np.array([radius * np.cos(angle), radius * np.sin(angle),
                        1.1 + 0.5 * rng.random()])
        target = np.array([0.0, 0.0, 0.9])
        poses.append(look_at(eye, target))
    return poses


def look_at(eye: np.ndarray, target: np.ndarray,
            up: np.ndarray = np.array([0.0, 0.0, 1.0])) -> np.ndarray:
    """Camera-to-world matrix, OpenCV convention (z forward, y down)."""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("view direction parallel to the up vector")
    right = right / norm
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, forward, eye
    return c2w


# --- label corruption ---------------------------------------------------------

def _frame_rng(cfg: CorruptionConfig, frame_id: int, salt: int = 0):
    return np.random.default_rng([cfg.seed, frame_id, salt])


def _segment_list(sem: np.ndarray, inst: np.ndarray):
    """Frame segments as (class_id, instance_id, mask), by first appearance."""
    code = sem.astype(np.int64) << 16 | inst.astype(np.int64)
    code[sem == images.VOID_CLASS] = -1
    flat = code.ravel()
    keys, first = np.unique(flat, return_index=True)
    order = np.argsort(first, kind="stable")
    out = []
    for key in keys[order]:
        if key == -1:
            continue
        out.append((int(key >> 16), int(key & 0xFFFF), code == key))
    return out


def _hole_slices(mask: np.ndarray, frac: float, rng):
    rows, cols = np.nonzero(mask)
    r0, r1 = rows.min(), rows.max() + 1
    c0, c1 = cols.min(), cols.max() + 1
    hh = max(1, int((r1 - r0) * frac))
    hw = max(1, int((c1 - c0) * frac))
    hr = int(rng.integers(r0, max(r0 + 1, r1 - hh + 1)))
    hc = int(rng.integers(c0, max(c0 + 1, c1 - hw + 1)))
    return slice(hr, hr + hh), slice(hc, hc + hw)


def corrupt_labels(gt_sem: np.ndarray, gt_inst: np.ndarray,
                   cfg: CorruptionConfig, frame_id: int,
                   table: ClassTable = CLASS_TABLE):
    """One corrupted (semantic, instance, confidence) label frame.

    Deterministic in (config seed, frame id).  Thing ids surviving a flip are
    re-rolled per frame when ``permute_ids`` is on, severing cross-view
    identity while leaving per-frame segments intact.
    """
    rng = _frame_rng(cfg, frame_id)
    sem = gt_sem.copy()
    inst = gt_inst.copy()
    conf = np.zeros(gt_sem.shape, dtype=np.float32)

    for class_id, inst_id, mask in _segment_list(gt_sem, gt_inst):
        flipped = rng.random() < cfg.flip_rate
        new_class = CONFUSION[class_id] if flipped else class_id

        if cfg.jitter > 0:
            shift = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
            mask = np.roll(mask, tuple(shift), axis=(0, 1))
        if cfg.morph_radius > 0:
            op = (ndimage.binary_dilation if rng.random() < 0.5
                  else ndimage.binary_erosion)
            mask = op(mask, iterations=cfg.morph_radius)
            if not mask.any():
                continue

        sem[mask] = new_class
        inst[mask] = inst_id if table.is_thing(new_class) else 0
        if cfg.overconfident:
            conf[mask] = rng.uniform(0.94, 1.0)
        else:
            conf[mask] = np.clip((1.0 - cfg.flip_rate)
                                 + rng.uniform(-0.05, 0.05), 0.0, 1.0)

        if cfg.hole_rate > 0 and rng.random() < cfg.hole_rate:
            hr, hc = _hole_slices(mask, cfg.hole_size, rng)
            hole = np.zeros_like(mask)
            hole[hr, hc] = True
            hole &= mask
            sem[hole] = images.VOID_CLASS
            inst[hole] = 0
            conf[hole] = 0.0

    if cfg.permute_ids:
        live = np.unique(inst[inst > 0])
        if len(live):
            perm_rng = _frame_rng(cfg, frame_id, salt=1)
            new_ids = perm_rng.choice(np.arange(1, 60000), size=len(live),
                                      replace=False)
            lut = np.zeros(int(inst.max()) + 1, dtype=np.uint16)
            lut[live] = new_ids
            inst = lut[inst]

    sem[gt_sem == images.VOID_CLASS] = images.VOID_CLASS
    return sem, inst.astype(np.uint16), conf


def corrupt_candidates(gt_sem: np.ndarray, gt_inst: np.ndarray,
                       cfg: CorruptionConfig, frame_id: int,
                       table: ClassTable = CLASS_TABLE) -> list[list[fusion.Segment]]:
    """K independently corrupted soft-mask candidate sets for one image.

    Each candidate re-rolls flips and jitter; segment distributions put
    1 - gamma on the (possibly flipped) class and spread gamma uniformly,
    with gamma = flip_rate when calibrated and 0.02 when overconfident.
    """
    n_classes = len(table.names)
    gamma = 0.02 if cfg.overconfident else max(cfg.flip_rate, 0.02)
    candidates = []
    for k in range(cfg.candidates):
        rng = _frame_rng(cfg, frame_id, salt=100 + k)
        cand = []
        for class_id, _, mask in _segment_list(gt_sem, gt_inst):
            flipped = rng.random() < cfg.flip_rate
            new_class = CONFUSION[class_id] if flipped else class_id
            if cfg.jitter > 0:
                shift = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
                mask = np.roll(mask, tuple(shift), axis=(0, 1))
            if cfg.hole_rate > 0 and rng.random() < cfg.hole_rate:
                hr, hc = _hole_slices(mask, cfg.hole_size, rng)
                mask = mask.copy()
                mask[hr, hc] = False
                if not mask.any():
                    continue
            dist = np.full(n_classes, gamma / n_classes)
            dist[new_class] += 1.0 - gamma
            cand.append(fusion.Segment(mask=mask.astype(np.float64),
                                       dist=dist))
        candidates.append(cand)
    return candidates


# --- dataset on disk ----------------------------------------------------------

DEFAULT_INTRINSICS = {"fx": 46.0, "fy": 46.0, "cx": 32.0, "cy": 32.0,
                      "width": 64, "height": 64}


def make_dataset(out_dir: str, scene_seed: int, n_frames: int,
                 corruption: CorruptionConfig,
                 intrinsics: dict | None = None,
                 table: ClassTable = CLASS_TABLE) -> dict:
    """Write a full scene dataset; returns the meta dict.

    Frames 3, 7, 11, ... (every fourth) form the test split and keep clean
    labels; the rest are training frames with corrupted supervision.  Clean
    GT labels for every frame land in ``sem_gt``/``inst_gt``.
    """
    if n_frames < 8:
        raise ValueError("need at least 8 frames for a meaningful split")
    intr = dict(intrinsics or DEFAULT_INTRINSICS)
    h, w = int(intr["height"]), int(intr["width"])

    scene = generate_scene(scene_seed)
    poses = orbit_poses(n_frames, seed=scene_seed + 1)
    test = [i for i in range(n_frames) if i % 4 == 3]
    train = [i for i in range(n_frames) if i % 4 != 3]

    for sub in ("rgb", "depth", "sem", "inst", "conf", "sem_gt", "inst_gt"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    for i in range(n_frames):
        stem = f"{i:04d}.png"
        rgb, depth, sem_gt, inst_gt = analytic_render(scene, poses[i], intr,
                                                      h, w)
        images.write_color(os.path.join(out_dir, "rgb", stem), rgb)
        images.write_depth(os.path.join(out_dir, "depth", stem), depth)
        images.write_semantic(os.path.join(out_dir, "sem_gt", stem), sem_gt)
        images.write_instance(os.path.join(out_dir, "inst_gt", stem), inst_gt)

        if i in test:
            sem, inst = sem_gt, inst_gt
            conf = np.ones((h, w), dtype=np.float32)
        else:
            sem, inst, conf = corrupt_labels(sem_gt, inst_gt, corruption, i,
                                             table)
        images.write_semantic(os.path.join(out_dir, "sem", stem), sem)
        images.write_instance(os.path.join(out_dir, "inst", stem), inst)
        images.write_confidence(os.path.join(out_dir, "conf", stem), conf)

        if corruption.candidates > 0 and i not in test:
            cands = corrupt_candidates(sem_gt, inst_gt, corruption, i, table)
            cdir = os.path.join(out_dir, "candidates", f"{i:04d}")
            fusion.write_candidates(cdir, cands, table)
            fused = fusion.fuse(cands, table, shape=(h, w))
            fusion.write_fused(os.path.join(out_dir, "fused"), f"{i:04d}",
                               fused)

    with open(os.path.join(out_dir, "poses.json"), "w") as f:
        json.dump([p.reshape(-1).tolist() for p in poses], f)
    with open(os.path.join(out_dir, "intrinsics.json"), "w") as f:
        json.dump(intr, f, indent=1, sort_keys=True)
    meta = {
        "class_table": table.to_json(),
        "bounds": scene.bounds.tolist(),
        "split": {"train": train, "test": test},
        "n_frames": n_frames,
        "scene_seed": scene_seed,
        "n_things": scene.thing_count(),
        "corruption": asdict(corruption),
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return meta
