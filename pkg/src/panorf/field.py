"""The panoptic radiance field: a vector-matrix factored density/appearance
grid plus small MLP heads for per-point semantic-class and surrogate-instance
distributions.

Geometry and appearance follow the factored-grid recipe: each scalar grid is a
sum over components of (1D line factor along one axis) x (2D plane factor over
the other two axes), interpolated linearly.  Density is decoded directly from
the factor sum; appearance features go through a linear basis and a tiny
view-conditioned MLP; the two segmentation heads are view-independent MLPs
over normalized position whose outputs are distributions by construction
(softmax inside the head).  An "unbounded" ablation mode makes the heads emit
raw logits instead.

Density activation: sigma = relu(softplus(z) - softplus(0)).  Zero factors
give exactly zero density, the output is non-negative everywhere, and the
pre-activation sign decides occupancy exactly (sigma == 0 iff z <= 0), which
the renderer exploits to skip empty space without approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .params import ParamStore

_AXES = ("x", "y", "z")
# plane for axis i covers the other two axes, in this fixed order
_PLANE_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}

_LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class ClassTable:
    """Ordered semantic class names with thing/stuff flags.

    Index in ``names`` is the class id used everywhere (labels, rendered
    outputs, metrics).  255 is reserved for void and must not be a real class.
    """

    names: tuple[str, ...]
    thing: tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) != len(self.thing):
            raise ValueError("names and thing flags must align")
        if not self.names:
            raise ValueError("class table cannot be empty")
        if len(self.names) >= 255:
            raise ValueError("class ids must stay below the void sentinel 255")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def thing_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.thing) if t]

    def stuff_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.thing) if not t]

    def is_thing(self, class_id: int) -> bool:
        return bool(self.thing[class_id])

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def to_json(self) -> dict:
        return {"names": list(self.names), "thing": list(self.thing)}

    @classmethod
    def from_json(cls, obj: dict) -> "ClassTable":
        return cls(tuple(obj["names"]), tuple(bool(t) for t in obj["thing"]))


@dataclass
class FieldConfig:
    """Field hyperparameters.  Defaults are the published full-scale sizes;
    ``desk()`` returns the shrunk preset used for CPU-scale runs."""

    bounds: tuple = ((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0))
    grid_res: int = 128
    density_components: int = 16
    appearance_components: int = 48
    appearance_dim: int = 27
    color_width: int = 128
    dir_pe_frequencies: int = 2
    semantic_layers: int = 5
    semantic_width: int = 256
    instance_layers: int = 3
    instance_width: int = 256
    num_instances: int = 50
    bounded: bool = True
    init_scale: float = 0.1

    @classmethod
    def desk(cls, bounds, **overrides) -> "FieldConfig":
        cfg = cls(
            bounds=bounds,
            grid_res=64,
            density_components=4,
            appearance_components=8,
            appearance_dim=24,
            color_width=32,
            semantic_layers=3,
            semantic_width=32,
            instance_layers=3,
            instance_width=32,
        )
        return replace(cfg, **overrides)

    def to_json(self) -> dict:
        return {
            "bounds": [list(b) for b in self.bounds],
            "grid_res": self.grid_res,
            "density_components": self.density_components,
            "appearance_components": self.appearance_components,
            "appearance_dim": self.appearance_dim,
            "color_width": self.color_width,
            "dir_pe_frequencies": self.dir_pe_frequencies,
            "semantic_layers": self.semantic_layers,
            "semantic_width": self.semantic_width,
            "instance_layers": self.instance_layers,
            "instance_width": self.instance_width,
            "num_instances": self.num_instances,
            "bounded": self.bounded,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FieldConfig":
        obj = dict(obj)
        obj["bounds"] = tuple(tuple(b) for b in obj["bounds"])
        return cls(**obj)


def positional_encoding(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """[x, sin(2^l x), cos(2^l x) for l < n_freqs], concatenated."""
    parts = [x]
    for l in range(n_freqs):
        parts.append(np.sin((2.0 ** l) * x))
        parts.append(np.cos((2.0 ** l) * x))
    return np.concatenate(parts, axis=-1).astype(x.dtype)


def _mlp_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype):
    lim = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
    b = np.zeros(fan_out)
    return w.astype(dtype), b.astype(dtype)


class PanopticField:
    """Field queries over world-space points.  All query methods accept numpy
    arrays and return tape Vars; callers are responsible for masking points to
    the bounding box (density outside the box is zero by contract and the
    renderer never asks for it)."""

    def __init__(self, cfg: FieldConfig, class_table: ClassTable,
                 store: ParamStore | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.class_table = class_table
        lo = np.array([b[0] for b in cfg.bounds])
        hi = np.array([b[1] for b in cfg.bounds])
        if not np.all(hi > lo):
            raise ValueError("bounds must have positive extent on every axis")
        self.lo = lo
        self.extent = hi - lo
        if store is None:
            store = ParamStore()
            self._init_params(store, rng or np.random.default_rng(0))
        self.store = store
        dt = store.dtype
        self._lo_t = self.lo.astype(dt)
        self._inv_extent = (1.0 / self.extent).astype(dt)

    # -- parameter creation -------------------------------------------------

    def _init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        cfg = self.cfg
        r = cfg.grid_res
        dt = store.dtype
        s = cfg.init_scale
        for ax in _AXES:
            store.add(f"density.line_{ax}",
                      rng.uniform(-s, s, size=(r, cfg.density_components)).astype(dt), "tensor")
            store.add(f"density.plane_{ax}",
                      rng.uniform(-s, s, size=(r, r, cfg.density_components)).astype(dt), "tensor")
            store.add(f"appearance.line_{ax}",
                      rng.uniform(-s, s, size=(r, cfg.appearance_components)).astype(dt), "tensor")
            store.add(f"appearance.plane_{ax}",
                      rng.uniform(-s, s, size=(r, r, cfg.appearance_components)).astype(dt), "tensor")
        basis, _ = _mlp_init(rng, 3 * cfg.appearance_components, cfg.appearance_dim, dt)
        store.add("appearance.basis", basis, "mlp")
        pe_dim = 3 + 6 * cfg.dir_pe_frequencies
        w, b = _mlp_init(rng, cfg.appearance_dim + pe_dim, cfg.color_width, dt)
        store.add("color.w0", w, "mlp")
        store.add("color.b0", b, "mlp")
        w, b = _mlp_init(rng, cfg.color_width, 3, dt)
        store.add("color.w1", w, "mlp")
        store.add("color.b1", b, "mlp")
        self._init_head(store, rng, "semantic", cfg.semantic_layers, cfg.semantic_width,
                        self.class_table.num_classes, dt)
        self._init_head(store, rng, "instance", cfg.instance_layers, cfg.instance_width,
                        cfg.num_instances, dt)

    @staticmethod
    def _init_head(store, rng, name, layers, width, out_dim, dt):
        dims = [3] + [width] * (layers - 1) + [out_dim]
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            w, b = _mlp_init(rng, fi, fo, dt)
            store.add(f"{name}.w{i}", w, "mlp")
            store.add(f"{name}.b{i}", b, "mlp")

    # -- queries -------------------------------------------------------------

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """World points -> per-axis [0, 1] grid coordinates."""
        return (points.astype(self._lo_t.dtype) - self._lo_t) * self._inv_extent

    def in_bounds(self, points: np.ndarray) -> np.ndarray:
        p01 = self.normalize(points)
        return np.all((p01 >= 0.0) & (p01 <= 1.0), axis=-1)

    def _vm_features(self, prefix: str, p01: np.ndarray) -> ad.Var:
        """Concatenated per-axis line*plane factor lookups as one (M, 3C) Var."""
        lines = [self.store[f"{prefix}.line_{ax}"] for ax in _AXES]
        planes = [self.store[f"{prefix}.plane_{ax}"] for ax in _AXES]
        return ad.vm_features(lines, planes, p01, _PLANE_AXES)

    def density(self, points: np.ndarray) -> ad.Var:
        """Non-negative volume density at world points (assumed in bounds)."""
        p01 = self.normalize(points)
        z = ad.reduce_sum(self._vm_features("density", p01), axis=1)
        return ad.relu(ad.sub(ad.softplus(z), np.asarray(_LN2, dtype=self.store.dtype)))

    def appearance(self, points: np.ndarray, dirs: np.ndarray) -> ad.Var:
        """View-dependent RGB in [0, 1] at world points."""
        p01 = self.normalize(points)
        feats = ad.matmul(self._vm_features("appearance", p01), self.store["appearance.basis"])
        dirs_n = dirs / np.maximum(np.linalg.norm(dirs, axis=-1, keepdims=True), 1e-12)
        pe = positional_encoding(dirs_n.astype(self.store.dtype), self.cfg.dir_pe_frequencies)
        h = ad.concat([feats, ad.as_var(pe)], axis=1)
        h = ad.relu(ad.affine(h, self.store["color.w0"], self.store["color.b0"]))
        return ad.sigmoid(ad.affine(h, self.store["color.w1"], self.store["color.b1"]))

    def _head(self, name: str, layers: int, points: np.ndarray) -> ad.Var:
        x01 = self.normalize(points)
        h = ad.as_var((2.0 * x01 - 1.0).astype(self.store.dtype))
        for i in range(layers):
            h = ad.affine(h, self.store[f"{name}.w{i}"], self.store[f"{name}.b{i}"])
            if i < layers - 1:
                h = ad.relu(h)
        if self.cfg.bounded:
            h = ad.softmax(h)
        return h

    def semantics(self, points: np.ndarray) -> ad.Var:
        """Per-point class distribution (or raw logits in unbounded mode)."""
        return self._head("semantic", self.cfg.semantic_layers, points)

    def instances(self, points: np.ndarray) -> ad.Var:
        """Per-point surrogate-identifier distribution over J slots."""
        return self._head("instance", self.cfg.instance_layers, points)

    # -- occupancy and resampling ---------------------------------------------

    def density_grid(self, res: int | None = None) -> np.ndarray:
        """Density evaluated at the grid nodes, tape-free, as (res,res,res)."""
        res = res or self.cfg.grid_res
        axes = [np.linspace(b[0], b[1], res) for b in self.cfg.bounds]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(self.store.dtype)
        out = np.empty(len(pts), dtype=self.store.dtype)
        for start in range(0, len(pts), 262144):
            chunk = pts[start:start + 262144]
            out[start:start + len(chunk)] = self.density(chunk).value
        return out.reshape(res, res, res)

    def occupancy(self) -> np.ndarray:
        """Boolean (res-1)^3 cell grid: False only where density is provably
        zero throughout the cell.

        The pre-activation is trilinear within each cell, hence bounded by its
        corner values; a cell whose eight corners all have zero density is
        exactly empty, so skipping it changes nothing.
        """
        sig = self.density_grid()
        pos = sig > 0
        occ = np.zeros((sig.shape[0] - 1,) * 3, dtype=bool)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    occ |= pos[dx:dx + occ.shape[0], dy:dy + occ.shape[1], dz:dz + occ.shape[2]]
        return occ

    def upsample(self, new_res: int) -> None:
        """Trilinearly resample all grid factors to a finer resolution.

        Optimizer moments for the resized parameters must be reset by the
        caller (the trainer rebuilds its optimizer after the bump).
        """
        old = self.cfg.grid_res
        if new_res <= old:
            raise ValueError("upsample target must exceed current resolution")
        xs = np.linspace(0, old - 1, new_res)
        i0 = np.minimum(xs.astype(int), old - 2)
        f = (xs - i0).astype(self.store.dtype)
        for prefix in ("density", "appearance"):
            for ax in _AXES:
                ln = self.store[f"{prefix}.line_{ax}"].value
                new_line = ln[i0] * (1 - f[:, None]) + ln[i0 + 1] * f[:, None]
                self.store.replace_value(f"{prefix}.line_{ax}", new_line)
                pl = self.store[f"{prefix}.plane_{ax}"].value
                tmp = pl[i0] * (1 - f[:, None, None]) + pl[i0 + 1] * f[:, None, None]
                new_plane = (tmp[:, i0] * (1 - f[None, :, None])
                             + tmp[:, i0 + 1] * f[None, :, None])
                self.store.replace_value(f"{prefix}.plane_{ax}", new_plane)
        self.cfg.grid_res = new_res

    # -- persistence -----------------------------------------------------------

    def checkpoint_extra(self) -> dict:
        return {
            "field_config": self.cfg.to_json(),
            "class_table": self.class_table.to_json(),
        }

    @classmethod
    def from_checkpoint_extra(cls, store: ParamStore, extra: dict) -> "PanopticField":
        cfg = FieldConfig.from_json(extra["field_config"])
        table = ClassTable.from_json(extra["class_table"])
        return cls(cfg, table, store=store)
