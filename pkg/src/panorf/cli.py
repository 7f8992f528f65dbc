"""Command-line pipeline driver.

Subcommands cover the whole workflow: generate a synthetic dataset, fuse
augmented label candidates, train a field, render views, evaluate renders,
apply edit scripts, and run the ablation grid.  Configs and reports are JSON;
raster data is PNG.  Usage/config mistakes exit 2, runtime failures exit 1
with a one-line reason on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import __version__, editing, fusion, metrics, synth, training
from .field import ClassTable
from .rendering import RenderConfig, render_image
from .synth import CorruptionConfig
from .training import SceneDataset, TrainConfig


class UsageError(Exception):
    """Malformed config or arguments: exits with status 2."""


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as err:
        raise UsageError(f"{what} {path} is not valid JSON: {err}") from err


def _from_keys(cls, obj: dict, what: str):
    allowed = {f.name for f in dc_fields(cls)}
    unknown = set(obj) - allowed
    if unknown:
        raise UsageError(
            f"{what} has unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as err:
        raise UsageError(f"{what} invalid: {err}") from err


# --- commands ---------------------------------------------------------------

def cmd_generate(args) -> None:
    cc_obj = _load_json(args.corruption, "corruption config") \
        if args.corruption else {}
    cc_obj.setdefault("seed", args.seed)
    corruption = _from_keys(CorruptionConfig, cc_obj, "corruption config")
    meta = synth.make_dataset(args.out, scene_seed=args.seed,
                              n_frames=args.frames, corruption=corruption)
    print(f"wrote {meta['n_frames']} frames to {args.out}")


def _table_for_candidates(cand_root: str, meta_path: str | None) -> ClassTable:
    path = meta_path or os.path.join(os.path.dirname(cand_root.rstrip("/")),
                                     "meta.json")
    if not os.path.exists(path):
        raise UsageError(f"cannot find class table: no meta.json at {path} "
                         "(pass --meta)")
    return ClassTable.from_json(_load_json(path, "meta")["class_table"])


def cmd_fuse(args) -> None:
    table = _table_for_candidates(args.candidates, args.meta)
    frames = sorted(d for d in os.listdir(args.candidates)
                    if os.path.isdir(os.path.join(args.candidates, d)))
    if not frames:
        raise FileNotFoundError(f"no candidate directories in {args.candidates}")
    for stem in frames:
        cands, _ = fusion.read_candidates(os.path.join(args.candidates, stem))
        shape = None
        for cand in cands:
            if cand:
                shape = cand[0].mask.shape
                break
        fused = fusion.fuse(cands, table, theta=args.theta, shape=shape)
        fusion.write_fused(args.out, stem, fused)
    print(f"fused {len(frames)} frames into {args.out}")


def _train_paths(out: str) -> tuple[str, str | None]:
    """--out may be a run directory or an explicit .ckpt path."""
    if out.endswith(".ckpt"):
        return os.path.dirname(out) or ".", out
    return out, None


def cmd_train(args) -> None:
    cfg_obj = _load_json(args.config, "train config") if args.config else {}
    if args.seed is not None:
        cfg_obj["seed"] = args.seed
    config = _from_keys(TrainConfig, cfg_obj, "train config")
    dataset = SceneDataset(args.data, use_fused=config.tta_labels)
    run_dir, ckpt = _train_paths(args.out)
    history = training.train(dataset, config, run_dir)
    if ckpt and os.path.abspath(ckpt) != os.path.abspath(history["checkpoint"]):
        os.replace(history["checkpoint"], ckpt)
    final = history["loss"][-1][0] if history["loss"] else float("nan")
    print(f"trained {config.iterations} iterations, final loss {final:.6g}")


def _pose_source(path: str) -> tuple[list[np.ndarray], dict, list[int]]:
    """Accept a dataset directory or a poses.json with intrinsics beside it."""
    if os.path.isdir(path):
        root = path
    else:
        root = os.path.dirname(path) or "."
    poses = [np.asarray(p, dtype=float).reshape(4, 4)
             for p in _load_json(os.path.join(root, "poses.json"), "poses")]
    intr = _load_json(os.path.join(root, "intrinsics.json"), "intrinsics")
    return poses, intr, list(range(len(poses)))


def _select_frames(poses_root: str, frames: list[int], split: str,
                   frames_arg: str | None) -> list[int]:
    if frames_arg:
        return [int(v) for v in frames_arg.split(",") if v != ""]
    if split != "all":
        meta_path = os.path.join(
            poses_root if os.path.isdir(poses_root)
            else os.path.dirname(poses_root) or ".", "meta.json")
        if not os.path.exists(meta_path):
            raise UsageError(f"--split {split} needs a meta.json next to the "
                             "poses (or use --frames)")
        return _load_json(meta_path, "meta")["split"][split]
    return frames


def _render_frames(field, poses, intr, frames, out_dir, n_samples,
                   occupancy) -> None:
    rcfg = RenderConfig(n_samples=n_samples)
    from . import images
    for sub in ("rgb", "depth", "sem", "inst", "conf"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    h, w = int(intr["height"]), int(intr["width"])
    for i in frames:
        out = render_image(field, poses[i], intr, rcfg, height=h, width=w,
                           occupancy=occupancy)
        stem = f"{i:04d}.png"
        images.write_color(os.path.join(out_dir, "rgb", stem), out["rgb"])
        images.write_depth(os.path.join(out_dir, "depth", stem), out["depth"])
        images.write_semantic(os.path.join(out_dir, "sem", stem),
                              out["semantic"])
        images.write_instance(os.path.join(out_dir, "inst", stem),
                              out["instance"])
        images.write_confidence(os.path.join(out_dir, "conf", stem),
                                np.clip(out["confidence"], 0.0, 1.0))


def cmd_render(args) -> None:
    field, _, _ = training.load_field(args.ckpt)
    poses, intr, frames = _pose_source(args.poses)
    frames = _select_frames(args.poses, frames, args.split, args.frames)
    _render_frames(field, poses, intr, frames, args.out, args.n_samples,
                   field.occupancy())
    print(f"rendered {len(frames)} frames to {args.out}")


def cmd_eval(args) -> None:
    report = metrics.evaluate_run(args.pred, args.gt, split=args.split)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    print(f"miou {report['miou']:.4f} pq_scene {report['pq_scene']:.4f} "
          f"psnr {report['psnr']:.2f} -> {args.out}")


def cmd_edit(args) -> None:
    field, _, _ = training.load_field(args.ckpt)
    try:
        script = editing.load_script(args.script)
        edited = editing.apply_script(field, script)
    except ValueError as err:
        raise UsageError(f"edit script: {err}") from err
    poses, intr, frames = _pose_source(args.poses)
    frames = _select_frames(args.poses, frames, args.split, args.frames)
    _render_frames(edited, poses, intr, frames, args.out, args.n_samples,
                   edited.occupancy())
    print(f"rendered {len(frames)} edited frames to {args.out}")


def cmd_ablate(args) -> None:
    cfg_obj = _load_json(args.config, "train config") if args.config else {}
    if args.seed is not None:
        cfg_obj["seed"] = args.seed
    base = _from_keys(TrainConfig, cfg_obj, "train config")
    rows = training.run_ablation_grid(args.data, base, args.out)
    print(f"wrote {len(rows)} ablation rows to {args.out}")


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="panorf",
        description="panoptic radiance fields: synthetic data, label fusion, "
                    "training, rendering, evaluation, editing")
    p.add_argument("--version", action="version",
                   version=f"panorf {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=100)
    g.add_argument("--corruption", help="JSON file of corruption settings")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fuse", help="fuse augmented label candidates")
    f.add_argument("--candidates", required=True,
                   help="directory of per-frame candidate dirs")
    f.add_argument("--theta", type=float, default=fusion.THETA_DEFAULT)
    f.add_argument("--meta", help="meta.json supplying the class table")
    f.add_argument("--seed", type=int, default=None, help="unused; accepted "
                   "for pipeline uniformity")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("train", help="optimize a field on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True,
                   help="run directory (or explicit .ckpt path)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--poses", required=True,
                   help="dataset directory or poses.json path")
    r.add_argument("--split", default="all", choices=("all", "train", "test"))
    r.add_argument("--frames", help="comma-separated frame ids")
    r.add_argument("--n-samples", type=int, default=192)
    r.add_argument("--seed", type=int, default=None, help="unused; accepted "
                   "for pipeline uniformity")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score renders against a dataset")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--seed", type=int, default=None, help="unused; accepted "
                   "for pipeline uniformity")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("edit", help="render with an edit script applied")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--script", required=True, help="JSON edit script")
    d.add_argument("--poses", required=True)
    d.add_argument("--split", default="all", choices=("all", "train", "test"))
    d.add_argument("--frames", help="comma-separated frame ids")
    d.add_argument("--n-samples", type=int, default=192)
    d.add_argument("--seed", type=int, default=None, help="unused; accepted "
                   "for pipeline uniformity")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_edit)

    a = sub.add_parser("ablate", help="train and score the ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--config", help="base TrainConfig JSON")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", required=True, help="output CSV table")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
