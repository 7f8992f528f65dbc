"""Volumetric rendering of the panoptic field.

The quadrature follows the standard emission-absorption model.  With samples
t_1 < ... < t_S spaced delta_i apart along a ray, per-sample opacity is
a_i = 1 - exp(-sigma_i * delta_i), transmittance is the exact exponential of
the accumulated optical depth T_i = exp(-sum_{j<i} sigma_j delta_j), and the
compositing weights are w_i = T_i * a_i.  Any per-point quantity f renders as
sum_i w_i f_i; ray opacity is sum_i w_i and depth is the unnormalized
sum_i w_i t_i.

Segmentation outputs are composited with *detached* weights by default, so the
semantic and instance losses cannot push gradients into density or appearance
parameters ("gradient blocking").  Because per-point class/identifier vectors
are distributions, rendered distributions simply sum to the ray opacity — no
renormalization anywhere.

Points with exactly zero compositing weight contribute nothing to any output
or gradient, so the expensive heads are only evaluated where w > 0; combined
with the density activation's exact zero set and the occupancy grid this skips
empty space without changing a single bit of the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .field import ClassTable

VOID_CLASS = 255


@dataclass
class RenderConfig:
    n_samples: int = 128
    stratified: bool = False
    near: float = 0.05
    far: float = 20.0
    tau_void: float = 0.05
    detach_seg_weights: bool = True
    chunk: int = 4096


@dataclass
class RenderedRays:
    """Per-ray composited quantities; entries are tape Vars (or None when the
    corresponding output was not requested)."""

    opacity: ad.Var
    depth: ad.Var
    weights: ad.Var
    t: np.ndarray
    color: ad.Var | None = None
    kappa: ad.Var | None = None
    pi: ad.Var | None = None


def camera_rays(c2w: np.ndarray, intrinsics: dict, height: int, width: int
                ) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel world-space origins and unit directions.

    Pinhole, OpenCV axes (x right, y down, z forward), rays through pixel
    centers (u + 0.5).
    """
    fx, fy = intrinsics["fx"], intrinsics["fy"]
    cx, cy = intrinsics["cx"], intrinsics["cy"]
    u, v = np.meshgrid(np.arange(width), np.arange(height))
    d_cam = np.stack([(u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, np.ones_like(u, dtype=float)],
                     axis=-1).reshape(-1, 3)
    rot, trans = c2w[:3, :3], c2w[:3, 3]
    d_world = d_cam @ rot.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(trans, d_world.shape).copy()
    return origins.astype(np.float32), d_world.astype(np.float32)


def ray_box_span(origins: np.ndarray, dirs: np.ndarray, bounds,
                 near: float, far: float) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit distances of each ray through the axis-aligned box, clipped
    to [near, far].  Misses come back with t1 <= t0."""
    lo = np.array([b[0] for b in bounds], dtype=origins.dtype)
    hi = np.array([b[1] for b in bounds], dtype=origins.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - origins) / dirs
        tb = (hi - origins) / dirs
    t_lo = np.minimum(ta, tb)
    t_hi = np.maximum(ta, tb)
    # axis-parallel rays: inside the slab forever, or never inside it
    zero = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    t_lo = np.where(zero, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(zero, np.where(inside, np.inf, -np.inf), t_hi)
    t0 = np.maximum(np.max(t_lo, axis=-1), near)
    t1 = np.minimum(np.min(t_hi, axis=-1), far)
    return t0, t1


def sample_along_rays(t0: np.ndarray, t1: np.ndarray, n_samples: int,
                      stratified: bool = False, rng: np.random.Generator | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Sample positions and bin widths over per-ray spans.

    Uniform bins; deterministic midpoints unless ``stratified``, in which case
    one uniform draw lands inside each bin.  Degenerate spans (misses) get
    zero-width bins, which contribute nothing downstream.
    """
    valid = t1 > t0
    t0 = np.where(valid, t0, 0.0)
    span = np.where(valid, t1 - t0, 0.0)
    delta = (span / n_samples).astype(np.float32)
    bins = np.arange(n_samples, dtype=np.float32)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random((len(t0), n_samples), dtype=np.float32)
    else:
        u = 0.5
    t = t0[:, None].astype(np.float32) + (bins + u) * delta[:, None]
    return t, np.broadcast_to(delta[:, None], t.shape)


def compositing_weights(sigma: ad.Var, delta: np.ndarray) -> tuple[ad.Var, ad.Var]:
    """Weights w_i = T_i a_i and ray opacity sum_i w_i for (B, S) densities."""
    s = ad.mul(sigma, ad.as_var(delta))
    transmittance = ad.exp(ad.neg(ad.cumsum_exclusive(s)))
    alpha = ad.sub(np.float32(1.0), ad.exp(ad.neg(s)))
    w = ad.mul(transmittance, alpha)
    return w, ad.reduce_sum(w, axis=1)


def occupancy_lookup(occ: np.ndarray, p01: np.ndarray) -> np.ndarray:
    """True where the point's interpolation cell may contain density."""
    n_cells = occ.shape[0]
    idx = np.clip((p01 * n_cells).astype(np.int64), 0, n_cells - 1)
    return occ[idx[:, 0], idx[:, 1], idx[:, 2]]


def render_rays(field, origins: np.ndarray, dirs: np.ndarray, cfg: RenderConfig,
                *, needs: tuple[str, ...] = ("color",),
                rng: np.random.Generator | None = None,
                occupancy: np.ndarray | None = None) -> RenderedRays:
    """Composite the requested outputs ("color", "semantics", "instances")
    for a batch of rays."""
    n_rays = len(origins)
    t0, t1 = ray_box_span(origins, dirs, field.cfg.bounds, cfg.near, cfg.far)
    t, delta = sample_along_rays(t0, t1, cfg.n_samples, cfg.stratified, rng)
    pts = (origins[:, None, :] + t[:, :, None] * dirs[:, None, :]).reshape(-1, 3)

    p01 = field.normalize(pts)
    live = np.all((p01 >= 0.0) & (p01 <= 1.0), axis=-1)
    live &= (delta > 0).ravel()
    if occupancy is not None:
        occ_hit = occupancy_lookup(occupancy, p01[live])
        live_idx = np.flatnonzero(live)[occ_hit]
    else:
        live_idx = np.flatnonzero(live)

    sigma_pts = field.density(pts[live_idx])
    sigma = ad.reshape(ad.scatter_rows(sigma_pts, live_idx, n_rays * cfg.n_samples),
                       (n_rays, cfg.n_samples))
    weights, opacity = compositing_weights(sigma, delta)
    depth = ad.reduce_sum(ad.mul(weights, ad.as_var(t)), axis=1)
    out = RenderedRays(opacity=opacity, depth=depth, weights=weights, t=t)

    active = np.flatnonzero(weights.value.ravel() > 0)
    if len(active) == 0 or not needs:
        zeros = lambda k: ad.as_var(np.zeros((n_rays, k), dtype=field.store.dtype))
        if "color" in needs:
            out.color = zeros(3)
        if "semantics" in needs:
            out.kappa = zeros(field.class_table.num_classes)
        if "instances" in needs:
            out.pi = zeros(field.cfg.num_instances)
        return out

    w_flat = ad.reshape(weights, (-1,))
    w_act = ad.reshape(ad.take_rows(w_flat, active, unique=True), (-1, 1))
    seg = active // cfg.n_samples
    pts_act = pts[active]

    if "color" in needs:
        dirs_act = np.broadcast_to(dirs[:, None, :], (n_rays, cfg.n_samples, 3)
                                   ).reshape(-1, 3)[active]
        c_pts = field.appearance(pts_act, dirs_act)
        out.color = ad.segment_sum(ad.mul(w_act, c_pts), seg, n_rays)

    w_seg = ad.stop_gradient(w_act) if cfg.detach_seg_weights else w_act
    if "semantics" in needs:
        k_pts = field.semantics(pts_act)
        out.kappa = ad.segment_sum(ad.mul(w_seg, k_pts), seg, n_rays)
    if "instances" in needs:
        i_pts = field.instances(pts_act)
        out.pi = ad.segment_sum(ad.mul(w_seg, i_pts), seg, n_rays)
    return out


def derive_panoptic(kappa: np.ndarray, pi: np.ndarray, opacity: np.ndarray,
                    table: ClassTable, tau_void: float = 0.05, bounded: bool = True
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rendered distributions -> (class map, packed instance map, confidence).

    Rays whose opacity falls below ``tau_void`` become void (class 255,
    instance 0, confidence 0).  Thing rays pack ``class * 256 + surrogate``;
    stuff rays store instance 0.
    """
    if not bounded:
        kappa = _softmax_np(kappa)
        pi = _softmax_np(pi)
    k_star = np.argmax(kappa, axis=-1)
    conf = np.clip(np.take_along_axis(kappa, k_star[:, None], axis=-1)[:, 0], 0.0, 1.0)
    j_star = np.argmax(pi, axis=-1)
    thing = np.array([table.is_thing(k) for k in range(table.num_classes)])[k_star]
    packed = np.where(thing, k_star * 256 + j_star, 0)
    if np.any(thing & (packed == 0)):
        raise ValueError("thing class 0 with surrogate 0 collides with the void code; "
                         "put a stuff class at table index 0")
    void = opacity < tau_void
    sem = np.where(void, VOID_CLASS, k_star).astype(np.uint8)
    packed = np.where(void, 0, packed).astype(np.uint16)
    conf = np.where(void, 0.0, conf).astype(np.float32)
    return sem, packed, conf


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def render_image(field, c2w: np.ndarray, intrinsics: dict, cfg: RenderConfig,
                 *, height: int, width: int,
                 occupancy: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Render one view to full output maps (tape-free; call outside any Tape).

    Returns rgb (H,W,3) float, depth (H,W) float, opacity (H,W), semantic
    (H,W) uint8, instance (H,W) uint16 packed, confidence (H,W) float.
    """
    origins, dirs = camera_rays(c2w, intrinsics, height, width)
    n = len(origins)
    rgb = np.zeros((n, 3), dtype=np.float32)
    depth = np.zeros(n, dtype=np.float32)
    opacity = np.zeros(n, dtype=np.float32)
    kappa = np.zeros((n, field.class_table.num_classes), dtype=np.float32)
    pi = np.zeros((n, field.cfg.num_instances), dtype=np.float32)
    for s in range(0, n, cfg.chunk):
        sl = slice(s, min(s + cfg.chunk, n))
        r = render_rays(field, origins[sl], dirs[sl], cfg,
                        needs=("color", "semantics", "instances"),
                        occupancy=occupancy)
        rgb[sl] = r.color.value
        depth[sl] = r.depth.value
        opacity[sl] = r.opacity.value
        kappa[sl] = r.kappa.value
        pi[sl] = r.pi.value
    sem, packed, conf = derive_panoptic(kappa, pi, opacity, field.class_table,
                                        cfg.tau_void, field.cfg.bounded)
    shape2 = (height, width)
    return {
        "rgb": rgb.reshape(height, width, 3),
        "depth": depth.reshape(shape2),
        "opacity": opacity.reshape(shape2),
        "semantic": sem.reshape(shape2),
        "instance": packed.reshape(shape2),
        "confidence": conf.reshape(shape2),
    }
