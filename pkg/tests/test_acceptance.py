"""Acceptance suite: each test checks one criterion at its stated tolerance and
prints a single PASS/FAIL line (also collected in the terminal summary).

The standard generator scene is run once per module; it takes a few minutes.
"""
import math
import time

import numpy as np
import pytest
from oracles import brute_force_chamfer, gradient_check, reference_ap, reference_flow_metrics

from motion_autolabel.autolabel import Observation, Track, register_and_refine, register_track
from motion_autolabel.cli import EXIT_OK, main
from motion_autolabel.config import PipelineConfig
from motion_autolabel.data import ObjectSpec, SceneRecipe, _car_surface, generate_scene, to_world
from motion_autolabel.geometry import NNIndex, RigidTransform, bev_iou, chamfer, min_area_box_along_direction, \
    wrap_angle
from motion_autolabel.metrics import detection_eval, flow_metrics
from motion_autolabel.mlp import MLP
from motion_autolabel.pipeline import evaluate, run_label
from motion_autolabel.preprocess import STATIC
from test_flow import target_purity
from test_metrics import jitter, random_boxes, random_flow_instance

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def standard_run():
    cfg = PipelineConfig()
    seq, gt = generate_scene(cfg.recipe())
    t0 = time.perf_counter()
    res = run_label(seq, cfg)
    return seq, gt, res, time.perf_counter() - t0


def true_speeds(seq, gt, k):
    return np.linalg.norm(gt.frames[k].point_flow, axis=1) / seq.dt(k)


# 1 ---------------------------------------------------------------------------------

def test_chamfer_equals_brute_force(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        q = rng.normal(scale=3.0, size=(int(rng.integers(1, 201)), 3))
        t = rng.normal(scale=3.0, size=(int(rng.integers(1, 201)), 3))
        mismatches += chamfer(q, NNIndex(t)) != brute_force_chamfer(q, t)
    elapsed = time.perf_counter() - t0
    ok = verdict(1, mismatches == 0 and elapsed < 5.0,
                 f"chamfer vs brute force: {mismatches}/100 mismatches, {elapsed:.2f} s (< 5 s)")
    assert ok


# 2 ---------------------------------------------------------------------------------

def test_loss_gradients_match_finite_differences(verdict):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 21))
        src = rng.normal(size=(n, 3))
        tgt = src + rng.normal(0.4, 0.3, size=(n, 3))
        worst = max(worst, max(gradient_check(MLP(), src, tgt, 0.1, rng)))
    elapsed = time.perf_counter() - t0
    ok = verdict(2, worst < 1e-4 and elapsed < 30.0,
                 f"worst relative gradient error {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 30 s)")
    assert ok


# 3 ---------------------------------------------------------------------------------

def test_flow_recovery(standard_run, verdict):
    seq, gt, res, _ = standard_run
    pred, true, dts, moving = [], [], [], []
    for k, f in enumerate(res.flows):
        pred.append(f.flow)
        true.append(gt.frames[k].point_flow)
        dts.append(np.full(len(f.flow), seq.dt(k)))
        moving.append(gt.frames[k].point_track >= 0)
    pred, true, dts, moving = (np.concatenate(a) for a in (pred, true, dts, moving))
    dyn = flow_metrics(pred[moving], true[moving], dts[moving])
    every = flow_metrics(pred, true, dts)
    seconds = res.timings["preprocess"] + res.timings["flow"]
    ok = verdict(3, dyn.epe3d < 0.05 and every.miou > 0.80 and seconds < 600,
                 f"EPE3D dynamic {dyn.epe3d:.4f} m (< 0.05), speed mIoU {every.miou:.3f} (> 0.80), "
                 f"bins {np.round(every.bin_iou, 2).tolist()}, {seconds:.0f} s (< 600 s)")
    assert ok


# 4 ---------------------------------------------------------------------------------

def test_static_precision(standard_run, verdict):
    seq, gt, res, _ = standard_run
    hits = total = 0
    for k, mask in enumerate(res.masks):
        marked = mask == STATIC
        hits += np.count_nonzero(marked & (true_speeds(seq, gt, k) < 0.2))
        total += np.count_nonzero(marked)
    precision = hits / total
    ok = verdict(4, precision >= 0.95, f"static precision {precision:.4f} (>= 0.95) over {total} points")
    assert ok


# 5 ---------------------------------------------------------------------------------

def test_pruning_purity(verdict):
    pruned = [target_purity(s, True) for s in range(10)]
    raw = [target_purity(s, False) for s in range(10)]
    ok = verdict(5, min(pruned) >= 0.9 and all(p > r for p, r in zip(pruned, raw)),
                 f"target purity pruned min {min(pruned):.3f} (>= 0.90), "
                 f"unpruned max {max(raw):.3f}, strictly better in {sum(p > r for p, r in zip(pruned, raw))}/10")
    assert ok


# 6 ---------------------------------------------------------------------------------

def test_icp_recovery(verdict):
    failures, worst_t, worst_yaw = 0, 0.0, 0.0
    for s in range(50):
        rng = np.random.default_rng(600 + s)
        L, W = 4.5, 1.9
        tgt = _car_surface(L, W, 1.6, 12, rng)
        yaw = rng.uniform(-0.5, 0.5)
        truth = RigidTransform(RigidTransform.from_yaw(yaw).rotation,
                               np.array([rng.uniform(-L / 2, L / 2), rng.uniform(-W / 2, W / 2), 0.0]))
        src = truth.inverse().apply(tgt) + rng.normal(scale=0.02, size=tgt.shape)
        reg = register_track([tgt, src[:-1]], [None, None], [0.0, -yaw])
        cs, ct = src[:-1].mean(axis=0), tgt.mean(axis=0)
        expect = truth.apply(cs[None])[0] - ct
        if 1 in reg.unregistered:
            failures += 1
            continue
        est = reg.transforms[1]
        et = float(np.linalg.norm(est.translation - expect))
        ey = abs(math.degrees(wrap_angle(est.yaw - yaw)))
        worst_t, worst_yaw = max(worst_t, et), max(worst_yaw, ey)
        failures += et > 0.05 or ey > 1.0
    ok = verdict(6, failures == 0, f"{failures}/50 failures, worst {worst_t:.3f} m / {worst_yaw:.2f} deg "
                                   f"(limits 0.05 m / 1 deg)")
    assert ok


# 7 ---------------------------------------------------------------------------------

def relative_dim_error(box, true):
    return max(abs(getattr(box, d) - getattr(true, d)) / getattr(true, d) for d in ("length", "width", "height"))


def test_amodal_reconstruction(verdict):
    obj = ObjectSpec("car", 4.5, 1.9, 1.6, x=3.0, y=6.0, heading=0.3, speed=8.0, yaw_rate=0.05,
                     slice_fraction=0.5, shape="car")
    seq, gt = generate_scene(SceneRecipe(objects=[obj], n_frames=10, seed=14, ground_points=0))
    tr = Track(0)
    for k, fr in enumerate(seq.frames):
        m = gt.frames[k].point_track == 0
        pts = to_world(fr)[m]
        box = min_area_box_along_direction(pts, gt.frames[k].point_flow[m].mean(axis=0)[:2])
        tr.observations.append(Observation(k, pts, box, box.heading, np.nonzero(m)[0]))
    register_and_refine(tr)
    refined = np.mean([relative_dim_error(tr.refined[o.frame], gt.frames[o.frame].boxes[0])
                       for o in tr.observations])
    visible = np.mean([relative_dim_error(o.box, gt.frames[o.frame].boxes[0]) for o in tr.observations])
    ok = verdict(7, refined < 0.15 and visible > 0.40,
                 f"dimension error refined {refined:.3f} (< 0.15), visible {visible:.3f} (> 0.40)")
    assert ok


# 8 ---------------------------------------------------------------------------------

def test_end_to_end_recall_and_false_tracks(standard_run, verdict):
    seq, gt, res, _ = standard_run
    by_frame = {}
    for r in res.labels:
        by_frame.setdefault(r.frame, []).append(r)
    moving = sorted({int(t) for fr in gt.frames for t, v in zip(fr.track_ids, fr.speeds) if v >= 1.0})
    recovered = 0
    for tid in moving:
        seen = matched = 0
        for k, fr in enumerate(gt.frames):
            ids = list(fr.track_ids)
            if tid not in ids or fr.num_points(tid) == 0:
                continue
            seen += 1
            box = fr.boxes[ids.index(tid)]
            matched += any(bev_iou(r.box, box) >= 0.4 for r in by_frame.get(seq.frames[k].index, []))
        recovered += seen > 0 and matched >= 0.5 * seen
    false_tracks = 0
    for tr in res.tracks:
        rows = [r for r in res.labels if r.track_id == tr.track_id]
        hit = sum(any(bev_iou(r.box, b) >= 0.4 for b in gt.frames[r.frame].boxes) for r in rows)
        false_tracks += hit * 2 <= len(rows)
    recall = recovered / len(moving)
    false_rate = false_tracks / max(len(res.tracks), 1)
    ok = verdict(8, recall >= 0.9 and false_rate <= 0.1,
                 f"object recall {recall:.2f} (>= 0.90), false tracks {false_tracks}/{len(res.tracks)} "
                 f"= {false_rate:.2f} (<= 0.10)")
    assert ok


# 9 ---------------------------------------------------------------------------------

def test_metrics_self_consistency(verdict):
    rng = np.random.default_rng(109)
    ap_bad = 0
    for trial in range(100):
        gts = random_boxes(rng, 10)
        preds = []
        for _ in range(20):
            f, b = gts[rng.integers(len(gts))] if rng.random() < 0.5 else random_boxes(rng, 1)[0]
            preds.append((f, jitter(rng, b), float(np.round(rng.random(), 1))))
        ap, _ = reference_ap(preds, gts, 0.4, bev_iou)
        ap_bad += abs(detection_eval(preds, gts, 0.4, bev_iou).ap - ap) > 1e-12
    flow_bad = 0
    for _ in range(100):
        pred, true = random_flow_instance(rng)
        ev, ref = flow_metrics(pred, true, 0.1), reference_flow_metrics(pred, true, 0.1)
        flow_bad += not (ev.epe3d == pytest.approx(ref["epe3d"], rel=1e-12)
                         and ev.acc5 == pytest.approx(ref["acc5"], rel=1e-12)
                         and ev.acc10 == pytest.approx(ref["acc10"], rel=1e-12)
                         and ev.theta == pytest.approx(ref["theta"], rel=1e-10)
                         and ev.miou == pytest.approx(ref["miou"], rel=1e-12))
    ok = verdict(9, ap_bad == 0 and flow_bad == 0,
                 f"AP oracle mismatches {ap_bad}/100, flow evaluator mismatches {flow_bad}/100")
    assert ok


# 10 --------------------------------------------------------------------------------

DETERMINISM_SCENE = """
seed = 5

[data.scene]
n_frames = 5

[[data.scene.objects]]
name = "car"
length = 4.5
width = 1.9
height = 1.6
x = -6.0
y = 5.0
speed = 8.0
shape = "car"

[[data.scene.objects]]
name = "cyclist"
length = 1.8
width = 0.7
height = 1.5
x = 4.0
y = -6.0
heading = 3.14159
speed = 4.0
clearance = 0.2
density = 20.0

[[data.scene.statics]]
length = 20.0
width = 0.3
height = 3.0
x = 0.0
y = 12.0
"""


def test_label_runs_are_byte_identical(tmp_path, verdict):
    cfg = tmp_path / "scene.toml"
    cfg.write_text(DETERMINISM_SCENE)
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "seq")]) == EXIT_OK
    outs = []
    for run in ("a", "b"):
        assert main(["label", "--config", str(cfg), "--seq", str(tmp_path / "seq"),
                     "--out", str(tmp_path / run)]) == EXIT_OK
        files = sorted(tmp_path.joinpath(run).glob("flow_*.bin")) + [tmp_path / run / "labels.jsonl"]
        outs.append({p.name: p.read_bytes() for p in files})
    same = outs[0] == outs[1]
    n_labels = outs[0]["labels.jsonl"].count(b"\n") - 1
    ok = verdict(10, same and len(outs[0]) == 6,
                 f"two label runs byte-identical: {same} ({len(outs[0])} files, {n_labels} label rows)")
    assert ok


# 11 --------------------------------------------------------------------------------

def test_oracle_substitution_ordering(standard_run, verdict):
    seq, gt, res, _ = standard_run
    report, _ = evaluate(res.labels, gt, PipelineConfig().metrics)
    sub = report["oracle_substitution"]
    base = sub["oracle"]["ap"]
    drop = {k: base - sub[k]["ap"] for k in ("pred_localization", "pred_size", "pred_orientation")}
    ok = verdict(11, drop["pred_localization"] > drop["pred_orientation"]
                 and drop["pred_size"] > drop["pred_orientation"],
                 "AP drop vs all-truth boxes: " + ", ".join(f"{k[5:]} {v:.4f}" for k, v in drop.items())
                 + " (localization and size must exceed orientation)")
    assert ok
