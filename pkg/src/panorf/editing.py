"""Render-time instance edits on a trained field: delete, duplicate, move.

Edits are non-destructive wrappers around a field.  Each wrapper passes every
query through unchanged except density (and, for duplication, the outputs in
the copied region), so the original checkpoint is never modified and wrappers
compose.

Membership tests ("is this point part of instance (k, j)?") and copied source
values are always evaluated against the *root* unedited field, not the
wrapped chain.  This is what makes duplicate-then-delete equal
delete-then-duplicate on disjoint regions: the deletion cannot eat the copy,
and the copy cannot resurrect deleted density.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad

SIGMA_EDIT = 1e-2


def _as_transform(t) -> np.ndarray:
    m = np.asarray(t, dtype=np.float64).reshape(4, 4)
    if abs(np.linalg.det(m)) < 1e-12:
        raise ValueError("edit transform is not invertible")
    return m


class _FieldView:
    """Delegating base for edit wrappers; subclasses override the queries
    they change."""

    def __init__(self, inner):
        self.inner = inner
        # the unedited field at the bottom of the wrapper stack
        self.root = getattr(inner, "root", inner)

    @property
    def cfg(self):
        return self.inner.cfg

    @property
    def class_table(self):
        return self.inner.class_table

    @property
    def store(self):
        return self.inner.store

    def normalize(self, points):
        return self.inner.normalize(points)

    def in_bounds(self, points):
        return self.inner.in_bounds(points)

    def density(self, points):
        return self.inner.density(points)

    def appearance(self, points, dirs):
        return self.inner.appearance(points, dirs)

    def semantics(self, points):
        return self.inner.semantics(points)

    def instances(self, points):
        return self.inner.instances(points)

    def occupancy(self):
        return self.inner.occupancy()


def _check_id(table, class_id: int, surrogate: int, num_instances: int):
    if not 0 <= class_id < table.num_classes or not table.is_thing(class_id):
        raise ValueError(f"class {class_id} is not a thing class")
    if not 0 <= surrogate < num_instances:
        raise ValueError(f"surrogate id {surrogate} out of range")


def _member_mask(root, points: np.ndarray, class_id: int, surrogate: int,
                 sigma_edit: float) -> np.ndarray:
    """True where the root field's most likely object id is (class_id,
    surrogate) and the density clears the edit floor."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    sigma = root.density(points).value
    m = sigma > sigma_edit
    if m.any():
        idx = np.flatnonzero(m)
        kappa = root.semantics(points[idx]).value
        m2 = kappa.argmax(axis=1) == class_id
        if m2.any():
            pi = root.instances(points[idx[m2]]).value
            m2[np.flatnonzero(m2)[pi.argmax(axis=1) != surrogate]] = False
        keep = np.zeros_like(m)
        keep[idx] = m2
        return keep
    return m


class DeletedInstance(_FieldView):
    """Zero the density of every point belonging to one object instance."""

    def __init__(self, inner, class_id: int, surrogate: int,
                 sigma_edit: float = SIGMA_EDIT):
        super().__init__(inner)
        _check_id(inner.class_table, class_id, surrogate,
                  inner.cfg.num_instances)
        self.class_id = int(class_id)
        self.surrogate = int(surrogate)
        self.sigma_edit = float(sigma_edit)

    def density(self, points):
        sigma = self.inner.density(points).value
        gone = _member_mask(self.root, points, self.class_id, self.surrogate,
                            self.sigma_edit)
        if not gone.any():
            return ad.as_var(sigma)
        out = sigma.copy()
        out[gone] = 0.0
        return ad.as_var(out)


class DuplicatedInstance(_FieldView):
    """Composite a transformed copy of one instance onto the scene.

    At a point x the source pre-image y = T^-1 x is tested for membership in
    the source instance; when it matches, the point takes whichever branch has
    the highest density (ties keep the base scene), and appearance queries in
    the source branch see view directions rotated back into the source frame.
    """

    def __init__(self, inner, class_id: int, surrogate: int, transform,
                 sigma_edit: float = SIGMA_EDIT):
        super().__init__(inner)
        _check_id(inner.class_table, class_id, surrogate,
                  inner.cfg.num_instances)
        self.class_id = int(class_id)
        self.surrogate = int(surrogate)
        self.transform = _as_transform(transform)
        self.inverse = np.linalg.inv(self.transform)
        self.sigma_edit = float(sigma_edit)

    def occupancy(self):
        # the copy may add density to cells that are empty in the base grid,
        # so the base occupancy is not a safe skip mask here
        return None

    def _source_points(self, points: np.ndarray) -> np.ndarray:
        h = np.concatenate([points, np.ones((len(points), 1))], axis=1)
        return (h @ self.inverse.T)[:, :3].astype(points.dtype)

    def _source_mask(self, src: np.ndarray) -> np.ndarray:
        ok = self.root.in_bounds(src)
        mask = np.zeros(len(src), dtype=bool)
        if ok.any():
            idx = np.flatnonzero(ok)
            mask[idx] = _member_mask(self.root, src[idx], self.class_id,
                                     self.surrogate, self.sigma_edit)
        return mask

    def _branches(self, points: np.ndarray):
        """(source points, source-wins mask) for a point batch."""
        src = self._source_points(points)
        match = self._source_mask(src)
        base = self.inner.density(points).value
        take = np.zeros(len(points), dtype=bool)
        if match.any():
            idx = np.flatnonzero(match)
            src_sigma = self.root.density(src[idx]).value
            take[idx] = src_sigma > base[idx]
        return src, take, base

    def density(self, points):
        src, take, base = self._branches(points)
        if not take.any():
            return ad.as_var(base)
        out = base.copy()
        out[take] = self.root.density(src[take]).value
        return ad.as_var(out)

    def appearance(self, points, dirs):
        src, take, _ = self._branches(points)
        out = self.inner.appearance(points, dirs).value
        if take.any():
            out = out.copy()
            rot = self.inverse[:3, :3].astype(points.dtype)
            src_dirs = np.atleast_2d(dirs)[take] @ rot.T
            out[take] = self.root.appearance(src[take], src_dirs).value
        return ad.as_var(out)

    def _mixed(self, points, query, src_query):
        src, take, _ = self._branches(points)
        out = query(points).value
        if take.any():
            out = out.copy()
            out[take] = src_query(src[take]).value
        return ad.as_var(out)

    def semantics(self, points):
        return self._mixed(points, self.inner.semantics, self.root.semantics)

    def instances(self, points):
        return self._mixed(points, self.inner.instances, self.root.instances)


def delete_instance(field, class_id: int, surrogate: int,
                    sigma_edit: float = SIGMA_EDIT) -> DeletedInstance:
    return DeletedInstance(field, class_id, surrogate, sigma_edit)


def duplicate_instance(field, class_id: int, surrogate: int, transform,
                       sigma_edit: float = SIGMA_EDIT) -> DuplicatedInstance:
    return DuplicatedInstance(field, class_id, surrogate, transform,
                              sigma_edit)


def manipulate_instance(field, class_id: int, surrogate: int, transform,
                        sigma_edit: float = SIGMA_EDIT) -> DeletedInstance:
    """Move an instance: duplicate it under ``transform``, then delete the
    original.  Both wrappers test membership against the root field, so the
    copy survives the deletion."""
    moved = duplicate_instance(field, class_id, surrogate, transform,
                               sigma_edit)
    return delete_instance(moved, class_id, surrogate, sigma_edit)


_OPS = {"delete": delete_instance,
        "duplicate": duplicate_instance,
        "manipulate": manipulate_instance}


def apply_script(field, script: list[dict]):
    """Apply a JSON edit script: a list of {op, id: [class, surrogate],
    transform: 4x4} entries, composed in order."""
    out = field
    for entry in script:
        op = entry.get("op")
        if op not in _OPS:
            raise ValueError(f"unknown edit op {op!r}")
        class_id, surrogate = (int(v) for v in entry["id"])
        sigma_edit = float(entry.get("sigma_edit", SIGMA_EDIT))
        if op == "delete":
            out = delete_instance(out, class_id, surrogate, sigma_edit)
        else:
            if "transform" not in entry:
                raise ValueError(f"edit op {op!r} needs a transform")
            out = _OPS[op](out, class_id, surrogate, entry["transform"],
                           sigma_edit)
    return out


def load_script(path: str) -> list[dict]:
    with open(path) as f:
        script = json.load(f)
    if not isinstance(script, list):
        raise ValueError("edit script must be a JSON list of operations")
    return script
