"""PNG pixel formats shared by the dataset writer, the renderer, fusion, and
evaluation.

- color: 8-bit RGB
- depth: 16-bit fixed point with a JSON sidecar holding the scale
  (``depth = png / scale``)
- semantic: 8-bit class index, 255 = void
- instance: 16-bit; dataset ground truth stores plain ids (0 = none),
  rendered output stores packed ``class * 256 + surrogate`` (0 = void)
- confidence: 16-bit fixed point mapping [0, 1] to [0, 65535]
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

VOID_CLASS = 255
DEPTH_SIDECAR_SUFFIX = ".json"


def write_color(path, rgb: np.ndarray) -> None:
    """rgb is float in [0, 1] (H, W, 3) or already uint8."""
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def read_color(path) -> np.ndarray:
    """Returns float32 in [0, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_depth(path, depth: np.ndarray, scale: float | None = None) -> None:
    path = Path(path)
    if scale is None:
        peak = float(depth.max()) if depth.size else 0.0
        scale = 65000.0 / peak if peak > 0 else 1.0
    q = np.clip(np.rint(depth * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)
    sidecar = path.with_suffix(DEPTH_SIDECAR_SUFFIX)
    sidecar.write_text(json.dumps({"scale": scale}))


def read_depth(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(DEPTH_SIDECAR_SUFFIX).read_text())
    q = np.asarray(Image.open(path), dtype=np.float32)
    return q / float(meta["scale"])


def write_semantic(path, sem: np.ndarray) -> None:
    Image.fromarray(sem.astype(np.uint8), mode="L").save(path)


def read_semantic(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def write_instance(path, inst: np.ndarray) -> None:
    arr = np.asarray(inst)
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("instance ids must fit in uint16")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def read_instance(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


def write_confidence(path, conf: np.ndarray) -> None:
    q = np.clip(np.rint(conf * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_confidence(path) -> np.ndarray:
    q = np.asarray(Image.open(path), dtype=np.float32)
    return q / 65535.0


def write_mask16(path, mask: np.ndarray) -> None:
    """Soft mask in [0, 1] as 16-bit fixed point (same codec as confidence)."""
    write_confidence(path, mask)


def read_mask16(path) -> np.ndarray:
    return read_confidence(path)
