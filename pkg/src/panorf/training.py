"""Optimization loop: lift noisy 2D panoptic labels into a field.

Each iteration samples two ray sets — R_S uniformly over every training pixel
(color + semantic supervision) and R_I from one uniformly drawn frame
(instance + segment-consistency supervision, which need whole-image context:
the identifier assignment and the segment majority vote are per-image
constructs).  The frame's 2D instance ids are matched to surrogate identifier
slots by linear assignment on detached rendered mass, then the four losses are
combined and one Adam step taken per group learning rate.

Toggles mirror the ablation table: segment consistency on/off, fused (TTA)
labels vs raw corrupted labels, bounded distributions vs raw logits, and
gradient blocking at the compositing weights.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import assignment, autodiff as ad, images, losses, metrics
from .field import ClassTable, FieldConfig, PanopticField
from .params import Adam, save_checkpoint, load_checkpoint
from .rendering import RenderConfig, camera_rays, render_image, render_rays


@dataclass
class TrainConfig:
    iterations: int = 8000
    batch_scene: int = 1024      # R_S rays per iteration
    batch_image: int = 1024      # R_I rays per iteration
    lr_mlp: float = 5e-4
    lr_tensor: float = 1e-2
    w_rgb: float = 1.0
    w_sem: float = 1.0
    w_ins: float = 1.0
    w_con: float = 1.35
    n_samples: int = 48
    consistency: bool = True
    # Iterations before the consistency term switches on.  Its majority-vote
    # targets are read off the model's own renderings, so the semantic field
    # must already track its supervision; enabling the term at iteration 0
    # drags every segment toward one globally dominant class.
    consistency_warmup: int = 1200
    tta_labels: bool = True
    bounded: bool = True
    gradient_blocking: bool = True
    grid_res: int = 64
    upsample_at: int | None = None
    upsample_res: int = 96
    occupancy_every: int = 250
    checkpoint_every: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.batch_scene < 1 or self.batch_image < 1:
            raise ValueError("batch sizes must be at least 1")

    @staticmethod
    def desk(**overrides) -> "TrainConfig":
        return TrainConfig(**overrides)

    @staticmethod
    def paper(**overrides) -> "TrainConfig":
        base = dict(iterations=450_000, n_samples=128, grid_res=128,
                    upsample_at=2000, upsample_res=192)
        base.update(overrides)
        return TrainConfig(**base)

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        return TrainConfig(**obj)

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(rgb=self.w_rgb, sem=self.w_sem,
                                  ins=self.w_ins, con=self.w_con)


class SceneDataset:
    """In-memory view of a dataset directory, rays precomputed per frame."""

    def __init__(self, root: str, use_fused: bool = False):
        self.root = root
        with open(os.path.join(root, "meta.json")) as f:
            self.meta = json.load(f)
        with open(os.path.join(root, "intrinsics.json")) as f:
            self.intrinsics = json.load(f)
        with open(os.path.join(root, "poses.json")) as f:
            flat = json.load(f)
        self.poses = [np.array(p).reshape(4, 4) for p in flat]
        self.table = ClassTable.from_json(self.meta["class_table"])
        self.bounds = np.array(self.meta["bounds"])
        self.train_frames: list[int] = self.meta["split"]["train"]
        self.test_frames: list[int] = self.meta["split"]["test"]
        self.height = int(self.intrinsics["height"])
        self.width = int(self.intrinsics["width"])
        self.use_fused = use_fused
        if use_fused and not os.path.isdir(os.path.join(root, "fused", "sem")):
            raise FileNotFoundError(
                "tta_labels requested but the dataset has no fused/ labels "
                "(generate with candidates > 0 or run the fuse command)")
        self._frames = {i: self._load_frame(i) for i in self.train_frames}

    def _label_paths(self, idx: int) -> str:
        if self.use_fused:
            return os.path.join(self.root, "fused")
        return self.root

    def _load_frame(self, idx: int) -> dict:
        stem = f"{idx:04d}"
        origins, dirs = camera_rays(self.poses[idx], self.intrinsics,
                                    self.height, self.width)
        rgb = images.read_color(
            os.path.join(self.root, "rgb", stem + ".png")).reshape(-1, 3)
        base = self._label_paths(idx)
        sem = images.read_semantic(
            os.path.join(base, "sem", stem + ".png")).ravel()
        inst = images.read_instance(
            os.path.join(base, "inst", stem + ".png")).ravel()
        conf = images.read_confidence(
            os.path.join(base, "conf", stem + ".png")).ravel()

        n_classes = len(self.table.names)
        valid = sem != images.VOID_CLASS
        # kappa_hat is the one-hot of the label image for both raw and fused
        # supervision; the fused soft distributions stay on disk for analysis
        # but spread probability mass onto confusable classes, which starves
        # the semantic term relative to the consistency term when trained on.
        kappa_hat = np.zeros((len(sem), n_classes), dtype=np.float32)
        kappa_hat[valid, sem[valid]] = 1.0
        code = sem.astype(np.int64) << 16 | inst.astype(np.int64)
        code[~valid] = -1
        _, seg = np.unique(code, return_inverse=True)
        seg = np.where(valid, seg, -1).astype(np.int64)
        seg = _compact_indices(seg)

        return {"origins": origins, "dirs": dirs, "rgb": rgb.astype(np.float32),
                "sem": sem, "inst": inst.astype(np.int64),
                "conf": conf.astype(np.float32), "valid": valid,
                "kappa_hat": kappa_hat, "seg": seg}

    @property
    def pixels_per_frame(self) -> int:
        return self.height * self.width

    def sample_scene_rays(self, rng, n: int) -> dict:
        """R_S: rays uniform over all train pixels of all frames."""
        frames = np.asarray(self.train_frames)[
            rng.integers(0, len(self.train_frames), size=n)]
        pix = rng.integers(0, self.pixels_per_frame, size=n)
        out = {k: np.empty((n,) + self._frames[self.train_frames[0]][k].shape[1:],
                           dtype=self._frames[self.train_frames[0]][k].dtype)
               for k in ("origins", "dirs", "rgb", "conf", "valid", "kappa_hat")}
        for f in np.unique(frames):
            sel = frames == f
            data = self._frames[int(f)]
            for k in out:
                out[k][sel] = data[k][pix[sel]]
        return out

    def sample_image_rays(self, rng, n: int) -> dict:
        """R_I: rays uniform over the pixels of one uniformly drawn frame."""
        f = int(np.asarray(self.train_frames)[
            rng.integers(0, len(self.train_frames))])
        pix = rng.integers(0, self.pixels_per_frame, size=n)
        data = self._frames[f]
        out = {k: data[k][pix] for k in
               ("origins", "dirs", "conf", "valid", "kappa_hat", "seg")}
        out["inst_ids"] = np.where(data["inst"][pix] > 0, data["inst"][pix], -1)
        out["frame"] = f
        return out


def _compact_indices(seg: np.ndarray) -> np.ndarray:
    """Renumber non-negative ids densely from 0, keeping -1 as-is."""
    live = seg >= 0
    if not live.any():
        return seg
    _, dense = np.unique(seg[live], return_inverse=True)
    out = np.full_like(seg, -1)
    out[live] = dense
    return out


def build_field(dataset: SceneDataset, config: TrainConfig) -> PanopticField:
    bounds = tuple((float(lo), float(hi))
                   for lo, hi in zip(dataset.bounds[0], dataset.bounds[1]))
    cfg = FieldConfig.desk(bounds=bounds, grid_res=config.grid_res,
                           bounded=config.bounded)
    return PanopticField(cfg, dataset.table,
                         rng=np.random.default_rng(config.seed))


def _render_cfg(config: TrainConfig) -> RenderConfig:
    return RenderConfig(n_samples=config.n_samples,
                        detach_seg_weights=config.gradient_blocking)


def train_step(field: PanopticField, dataset: SceneDataset,
               config: TrainConfig, rng, occupancy,
               it: int | None = None) -> tuple[ad.Var, dict]:
    """Build the full loss for one sampled batch. Returns (total, parts).

    When ``it`` is given, the consistency term stays off before
    ``config.consistency_warmup``.
    """
    use_con = config.consistency and (it is None
                                      or it >= config.consistency_warmup)
    rcfg = _render_cfg(config)
    batch_s = dataset.sample_scene_rays(rng, config.batch_scene)
    batch_i = dataset.sample_image_rays(rng, config.batch_image)

    out_s = render_rays(field, batch_s["origins"], batch_s["dirs"], rcfg,
                        needs=("color", "semantics"), occupancy=occupancy)
    needs_i = ("semantics", "instances") if use_con else ("instances",)
    out_i = render_rays(field, batch_i["origins"], batch_i["dirs"], rcfg,
                        needs=needs_i, occupancy=occupancy)

    scores, ids = assignment.instance_scores(out_i.pi.value,
                                             batch_i["inst_ids"])
    cols = assignment.solve_assignment(scores)
    lut = dict(zip(ids.tolist(), cols.tolist()))
    targets = np.array([lut.get(i, -1) for i in batch_i["inst_ids"].tolist()],
                       dtype=np.int64)

    parts = {
        "rgb": losses.loss_rgb(out_s.color, batch_s["rgb"]),
        "sem": losses.loss_semantic(out_s.kappa, batch_s["kappa_hat"],
                                    batch_s["conf"], batch_s["valid"],
                                    bounded=config.bounded),
        "ins": losses.loss_instance(out_i.pi, targets, batch_i["conf"],
                                    bounded=config.bounded),
    }
    if use_con:
        parts["con"] = losses.loss_consistency(out_i.kappa, batch_i["seg"],
                                               batch_i["conf"],
                                               bounded=config.bounded)
    else:
        parts["con"] = ad.as_var(np.zeros(()))
    total = losses.combine(parts, config.loss_weights(),
                           use_consistency=use_con)
    return total, parts


def train(dataset: SceneDataset, config: TrainConfig, out_dir: str) -> dict:
    """Full optimization; writes checkpoints and a per-iteration loss CSV.

    Returns a history dict with the loss curves and checkpoint paths.  A
    non-finite loss halts training, re-saves the last finite-loss parameters,
    and raises RuntimeError.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    field = build_field(dataset, config)
    optimizer = Adam(field.store,
                     {"tensor": config.lr_tensor, "mlp": config.lr_mlp})
    occupancy = field.occupancy()

    log_path = os.path.join(out_dir, "loss.csv")
    ckpt_path = os.path.join(out_dir, "field.ckpt")
    history = {"loss": [], "log_path": log_path, "checkpoint": ckpt_path}
    last_good = {name: var.value.copy() for name, var in field.store.items()}

    with open(log_path, "w", newline="") as logf:
        writer = csv.writer(logf)
        writer.writerow(["iteration", "total", "rgb", "sem", "ins", "con"])
        for it in range(config.iterations):
            if config.upsample_at is not None and it == config.upsample_at:
                field.upsample(config.upsample_res)
                optimizer = Adam(field.store, {"tensor": config.lr_tensor,
                                               "mlp": config.lr_mlp})
                occupancy = field.occupancy()
                last_good = {name: var.value.copy()
                             for name, var in field.store.items()}
            elif it % config.occupancy_every == 0 and it > 0:
                occupancy = field.occupancy()

            try:
                with ad.Tape() as tape:
                    total, parts = train_step(field, dataset, config, rng,
                                              occupancy, it=it)
                    tape.backward(total)
            except ad.NonFiniteLossError as err:
                for name, var in field.store.items():
                    var.value[...] = last_good[name]
                _save(ckpt_path, field, it, config)
                raise RuntimeError(
                    f"training halted at iteration {it}: {err}; "
                    f"last good checkpoint written to {ckpt_path}") from err

            for name, var in field.store.items():
                np.copyto(last_good[name], var.value)
            optimizer.step()

            row = [it, float(total.value), float(parts["rgb"].value),
                   float(parts["sem"].value), float(parts["ins"].value),
                   float(parts["con"].value)]
            writer.writerow([f"{v:.8g}" if isinstance(v, float) else v
                             for v in row])
            history["loss"].append(row[1:])

            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                _save(ckpt_path, field, it + 1, config)

    _save(ckpt_path, field, config.iterations, config)
    history["field"] = field
    return history


def _save(path: str, field: PanopticField, step: int, config: TrainConfig):
    extra = field.checkpoint_extra()
    extra["train_config"] = config.to_json()
    save_checkpoint(path, field.store, step=step, extra=extra)


def load_field(path: str) -> tuple[PanopticField, int, dict]:
    store, step, extra = load_checkpoint(path)
    field = PanopticField.from_checkpoint_extra(store, extra)
    return field, step, extra


def render_outputs(field: PanopticField, dataset: SceneDataset,
                   frames: list[int], out_dir: str,
                   n_samples: int = 192) -> None:
    """Render frames to the dataset PNG formats (rgb/depth/sem/inst/conf)."""
    rcfg = RenderConfig(n_samples=n_samples)
    occupancy = field.occupancy()
    for sub in ("rgb", "depth", "sem", "inst", "conf"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for i in frames:
        out = render_image(field, dataset.poses[i], dataset.intrinsics, rcfg,
                           height=dataset.height, width=dataset.width,
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


ABLATION_ROWS = [
    # (consistency, tta, bounded, blocking) per the ablation table
    (False, False, False, False),
    (False, True, True, True),
    (True, False, True, True),
    (True, True, False, True),
    (True, True, True, False),
    (True, True, True, True),
]


def run_ablation_grid(data_dir: str, base: TrainConfig, out_csv: str,
                      work_dir: str | None = None) -> list[dict]:
    """Train the six ablation rows and tabulate mIoU / scene PQ / PSNR."""
    work_dir = work_dir or os.path.join(os.path.dirname(out_csv) or ".",
                                        "ablation_runs")
    rows = []
    for idx, (con, tta, bounded, blocking) in enumerate(ABLATION_ROWS):
        cfg = replace(base, consistency=con, tta_labels=tta, bounded=bounded,
                      gradient_blocking=blocking)
        dataset = SceneDataset(data_dir, use_fused=cfg.tta_labels)
        run_dir = os.path.join(work_dir, f"row{idx}")
        history = train(dataset, cfg, run_dir)
        pred_dir = os.path.join(run_dir, "renders")
        render_outputs(history["field"], dataset, dataset.test_frames,
                       pred_dir)
        report = metrics.evaluate_run(pred_dir, data_dir)
        rows.append({"consistency": con, "tta": tta, "bounded": bounded,
                     "blocking": blocking, "miou": report["miou"],
                     "pq_scene": report["pq_scene"], "psnr": report["psnr"]})
    os.makedirs(os.path.dirname(out_csv) or ".", exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows
