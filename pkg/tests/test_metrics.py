import json

import numpy as np
import pytest

from panorf import metrics
from panorf.field import ClassTable
from helpers import tile_frames

VOID = metrics.VOID

TABLE = ClassTable(names=("wall", "floor", "chair", "sofa"),
                   thing=(False, False, True, True))


# --- psnr ------------------------------------------------------------------

def test_psnr_identical_capped():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert metrics.psnr(img, img) == 99.0


def test_psnr_known_mse():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # MSE 0.01 -> 20 dB
    assert metrics.psnr(a, b) == pytest.approx(20.0)
    assert metrics.psnr(np.zeros(4), np.ones(4)) == pytest.approx(0.0)


# --- miou -------------------------------------------------------------------

def test_miou_perfect():
    gt = np.array([[0, 1], [2, 3]], dtype=np.uint8)
    mean, per_class = metrics.miou(gt, gt, 4)
    assert mean == 1.0
    np.testing.assert_array_equal(per_class, 1.0)


def test_miou_constant_prediction_half_split():
    gt = np.repeat(np.array([0, 1], dtype=np.uint8), 50)
    pred = np.zeros(100, dtype=np.uint8)
    mean, per_class = metrics.miou(pred, gt, 2)
    # class 0: inter 50, union 100 -> 0.5; class 1: 0 -> mean 0.25
    assert per_class[0] == pytest.approx(0.5)
    assert per_class[1] == 0.0
    assert mean == pytest.approx(0.25)


def test_miou_ignores_absent_classes_and_void():
    gt = np.array([0, 0, VOID, VOID], dtype=np.uint8)
    pred = np.array([0, 3, 1, 2], dtype=np.uint8)
    mean, per_class = metrics.miou(pred, gt, 4)
    # only class 0 present in GT; predictions on GT-void pixels are ignored
    assert mean == pytest.approx(0.5)
    assert np.isnan(per_class[1]) and np.isnan(per_class[2])


def test_miou_pools_pixels_across_frames():
    gt = [np.zeros(10, np.uint8), np.ones(10, np.uint8)]
    pred = [np.zeros(10, np.uint8), np.zeros(10, np.uint8)]
    mean, _ = metrics.miou(pred, gt, 2)
    assert mean == pytest.approx(0.25)


# --- frame-level PQ ----------------------------------------------------------

def _maps(sem, inst=None):
    sem = np.asarray(sem, dtype=np.uint8)
    if inst is None:
        inst = np.zeros_like(sem, dtype=np.uint16)
    return sem, np.asarray(inst, dtype=np.uint16)


def test_pq_perfect_prediction():
    sem = np.array([[2, 2, 1], [3, 3, 1]])
    inst = np.array([[5, 5, 0], [9, 9, 0]])
    rep = metrics.pq_frame([_maps(sem, inst)], [_maps(sem, inst)], TABLE)
    assert rep["pq"] == rep["sq"] == rep["rq"] == 1.0


def test_pq_partial_overlap_hand_value():
    # 1x100 strip: GT chair on [0:40), floor elsewhere; pred chair on [10:50)
    gt_sem = np.full((1, 100), 1, np.uint8)
    gt_sem[0, :40] = 2
    gt_inst = np.zeros((1, 100), np.uint16)
    gt_inst[0, :40] = 1
    pr_sem = np.full((1, 100), 1, np.uint8)
    pr_sem[0, 10:50] = 2
    pr_inst = np.zeros((1, 100), np.uint16)
    pr_inst[0, 10:50] = 7
    rep = metrics.pq_frame([(pr_sem, pr_inst)], [(gt_sem, gt_inst)], TABLE)
    # chair: inter 30, union 40+40-30 = 50 -> IoU 0.6, one TP
    assert rep["per_class"]["2"]["pq"] == pytest.approx(0.6)
    assert rep["per_class"]["2"]["tp"] == 1
    # floor: inter 50, union 60+60-50 = 70
    assert rep["per_class"]["1"]["pq"] == pytest.approx(50 / 70)


def test_pq_miss_counts_fn():
    gt_sem = np.full((2, 2), 2, np.uint8)
    gt_inst = np.ones((2, 2), np.uint16)
    pr_sem = np.full((2, 2), VOID, np.uint8)
    pr_inst = np.zeros((2, 2), np.uint16)
    rep = metrics.pq_frame([(pr_sem, pr_inst)], [(gt_sem, gt_inst)], TABLE)
    assert rep["pq"] == 0.0
    assert rep["per_class"]["2"]["fn"] == 1


def test_pq_void_conventions():
    # prediction mostly over GT void is dropped, not a false positive
    gt_sem = np.full((1, 10), VOID, np.uint8)
    gt_sem[0, :2] = 1
    pr_sem = np.full((1, 10), 2, np.uint8)
    pr_inst = np.ones((1, 10), np.uint16)
    rep = metrics.pq_frame([(pr_sem, pr_inst)],
                           [_maps(gt_sem)], TABLE)
    assert "2" not in rep["per_class"]  # 80% void overlap: ignored
    assert rep["per_class"]["1"]["fn"] == 1
    # GT-void pixels also leave the IoU denominator of matches
    gt_sem2 = np.full((1, 10), 1, np.uint8)
    gt_sem2[0, 8:] = VOID
    pr_sem2 = np.full((1, 10), 1, np.uint8)
    rep = metrics.pq_frame([_maps(pr_sem2)], [_maps(gt_sem2)], TABLE)
    assert rep["per_class"]["1"]["pq"] == pytest.approx(1.0)


def test_pq_equals_sq_times_rq():
    rng = np.random.default_rng(1)
    frames_p, frames_g = _random_scene(rng, n_frames=4)
    rep = metrics.pq_frame(frames_p, frames_g, TABLE)
    for row in rep["per_class"].values():
        if row["tp"]:
            assert row["pq"] == pytest.approx(row["sq"] * row["rq"], abs=1e-9)


def test_pq_matching_is_unique():
    rng = np.random.default_rng(2)
    frames_p, frames_g = _random_scene(rng, n_frames=6)
    rep = metrics.pq_frame(frames_p, frames_g, TABLE)
    for row in rep["per_class"].values():
        assert row["tp"] >= 0 and row["fp"] >= 0 and row["fn"] >= 0
    scene = metrics.pq_scene(frames_p, frames_g, TABLE)
    for c, row in scene["per_class"].items():
        n_gt = row["tp"] + row["fn"]
        assert row["tp"] <= n_gt


# --- scene-level PQ -----------------------------------------------------------

def test_scene_pq_punishes_per_frame_ids():
    # same object, perfect masks, different pred id in each of 4 frames
    frames_g, frames_p = [], []
    for f in range(4):
        sem = np.full((4, 4), 1, np.uint8)
        sem[1:3, 1:3] = 2
        inst_gt = np.zeros((4, 4), np.uint16)
        inst_gt[1:3, 1:3] = 1
        inst_pr = np.zeros((4, 4), np.uint16)
        inst_pr[1:3, 1:3] = f + 1  # new id every frame
        frames_g.append((sem, inst_gt))
        frames_p.append((sem.copy(), inst_pr))
    frame_rep = metrics.pq_frame(frames_p, frames_g, TABLE)
    scene_rep = metrics.pq_scene(frames_p, frames_g, TABLE)
    assert frame_rep["per_class"]["2"]["pq"] == 1.0
    # pooled: each pred subset covers 1/4 of the GT subset -> no match
    assert scene_rep["per_class"]["2"]["pq"] == 0.0
    assert scene_rep["per_class"]["2"]["fn"] == 1
    assert scene_rep["per_class"]["2"]["fp"] == 4
    # stuff class unaffected by ids
    assert scene_rep["per_class"]["1"]["pq"] == 1.0


def _random_scene(rng, n_frames=4, h=12, w=12, consistent=True):
    """Random pred/gt map pairs with moderately overlapping segments."""
    frames_p, frames_g = [], []
    for _ in range(n_frames):
        gt_sem = rng.integers(0, 4, size=(h, w)).astype(np.uint8)
        gt_sem[rng.random((h, w)) < 0.05] = VOID
        gt_inst = rng.integers(1, 4, size=(h, w)).astype(np.uint16)
        # predictions: GT with patches of noise
        pr_sem = gt_sem.copy()
        pr_inst = gt_inst.copy()
        noise = rng.random((h, w)) < 0.2
        pr_sem[noise] = rng.integers(0, 4, size=int(noise.sum()))
        pr_inst[noise] = rng.integers(1, 4, size=int(noise.sum()))
        if not consistent:
            perm = rng.permutation(8)
            pr_inst = perm[pr_inst].astype(np.uint16) + 1
        frames_g.append((gt_sem, gt_inst))
        frames_p.append((pr_sem, pr_inst))
    return frames_p, frames_g


def test_scene_pq_matches_tiling_oracle():
    rng = np.random.default_rng(3)
    for case in range(50):
        n = int(rng.integers(2, 5))
        frames_p, frames_g = _random_scene(rng, n_frames=n, h=8, w=8,
                                           consistent=bool(case % 2))
        scene = metrics.pq_scene(frames_p, frames_g, TABLE)
        tiled_p = (tile_frames([f[0] for f in frames_p], pad_value=VOID),
                   tile_frames([f[1] for f in frames_p], pad_value=0))
        tiled_g = (tile_frames([f[0] for f in frames_g], pad_value=VOID),
                   tile_frames([f[1] for f in frames_g], pad_value=0))
        tiled = metrics.pq_frame([tiled_p], [tiled_g], TABLE)
        assert scene["pq"] == tiled["pq"], f"case {case}"
        assert scene["sq"] == tiled["sq"]
        assert scene["rq"] == tiled["rq"]
        for c in scene["per_class"]:
            assert scene["per_class"][c] == tiled["per_class"][c]


def test_scene_pq_invariant_to_consistent_relabeling():
    rng = np.random.default_rng(4)
    frames_p, frames_g = _random_scene(rng, n_frames=3)
    base = metrics.pq_scene(frames_p, frames_g, TABLE)
    perm = rng.permutation(64).astype(np.uint16) + 1
    relabeled = [(s, perm[i]) for s, i in frames_p]
    again = metrics.pq_scene(relabeled, frames_g, TABLE)
    # identical matches; only the float summation order may differ
    assert again["pq"] == pytest.approx(base["pq"], rel=1e-12)
    for c, row in base["per_class"].items():
        other = again["per_class"][c]
        assert (row["tp"], row["fp"], row["fn"]) == \
               (other["tp"], other["fp"], other["fn"])
        assert other["pq"] == pytest.approx(row["pq"], rel=1e-12)


def test_report_round_trips_through_json():
    rng = np.random.default_rng(5)
    frames_p, frames_g = _random_scene(rng)
    rep = metrics.pq_scene(frames_p, frames_g, TABLE)
    assert json.loads(json.dumps(rep)) == rep
