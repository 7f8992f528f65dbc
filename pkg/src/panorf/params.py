"""Named parameter storage, the Adam optimizer, and checkpoint (de)serialization.

Checkpoints are a single file: a little-endian uint32 manifest length, a JSON
manifest (parameter names, shapes, groups, dtype, training step, plus an
arbitrary ``extra`` dict for model metadata), then one contiguous
little-endian float32 payload holding every parameter in manifest order.
"""

from __future__ import annotations

import json
import struct
from typing import Iterator

import numpy as np

from .autodiff import Var, leaf

_MAGIC = b"PRF1"


class ParamStore:
    """Ordered, named collection of trainable arrays with gradient buffers.

    Every parameter belongs to a learning-rate group (``"tensor"`` for grid
    factors, ``"mlp"`` for head weights).  The insertion order defines the
    checkpoint payload order.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Var] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, value: np.ndarray, group: str) -> Var:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = leaf(np.ascontiguousarray(value, dtype=self.dtype), op=f"param:{name}")
        self._params[name] = v
        self._groups[name] = group
        return v

    def __getitem__(self, name: str) -> Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[tuple[str, Var]]:
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad[...] = 0

    def replace_value(self, name: str, value: np.ndarray) -> None:
        """Swap a parameter's array in place (used by grid upsampling).

        The gradient buffer is re-allocated to match; optimizer state for the
        parameter must be reset by the caller.
        """
        v = self._params[name]
        v.value = np.ascontiguousarray(value, dtype=self.dtype)
        v.grad = np.zeros_like(v.value)


class Adam:
    """Adam with per-group learning rates and persistent moment buffers.

    ``step()`` consumes the gradients accumulated by the last backward pass
    and zeroes them afterwards, so calling it twice in a row performs a
    zero-gradient step (moments decay, the step counter still advances).
    """

    def __init__(self, store: ParamStore, lr_by_group: dict[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr_by_group = dict(lr_by_group)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        for name, var in store.items():
            group = store.group_of(name)
            if group not in self.lr_by_group:
                raise KeyError(f"parameter group {group!r} has no learning rate")
            self._m[name] = np.zeros_like(var.value)
            self._v[name] = np.zeros_like(var.value)

    def reset_state(self, name: str) -> None:
        var = self.store[name]
        self._m[name] = np.zeros_like(var.value)
        self._v[name] = np.zeros_like(var.value)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, var in self.store.items():
            g = var.grad
            lr = self.lr_by_group[self.store.group_of(name)]
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            m_hat = m / bias1
            v_hat = v / bias2
            var.value -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(var.value.dtype)
            g[...] = 0


def save_checkpoint(path, store: ParamStore, step: int, extra: dict | None = None) -> None:
    manifest = {
        "format": 1,
        "step": int(step),
        "dtype": "float32",
        "params": [
            {"name": name, "shape": list(var.value.shape), "group": store.group_of(name)}
            for name, var in store.items()
        ],
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, var in store.items():
            f.write(np.ascontiguousarray(var.value, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, int, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(n).decode("utf-8"))
        store = ParamStore(dtype=dtype)
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"truncated payload at parameter {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            store.add(entry["name"], arr.astype(dtype), entry["group"])
        trailing = f.read(1)
        if trailing:
            raise ValueError("checkpoint has trailing bytes after payload")
    return store, manifest["step"], manifest.get("extra", {})
