"""End-to-end runs: motion masks, per-frame flow, auto labels and the run manifest."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autolabel import LabelRow, autolabel_sequence, export_labels, track_labels
from .config import PipelineConfig
from .data import GroundTruth, Sequence, to_world
from .flow import FlowField, estimate_frame_flow, load_flow, save_flow
from .geometry import bev_iou, iou3d
from .metrics import (
    SPEED_EDGES,
    Detection,
    build_report,
    detection_eval,
    flow_metrics,
    oracle_substitution,
)
from .preprocess import DYNAMIC, build_mask

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    worlds: list
    masks: list
    flows: list                                   # FlowField per frame
    tracks: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)   # stage -> seconds
    notes: list = field(default_factory=list)


def _reference_frames(worlds: list, k: int, window: int) -> list:
    """Earlier frames for the static test; the first frame borrows the frames after it."""
    if k > 0:
        return worlds[max(0, k - window):k]
    return worlds[1:1 + window]


def motion_masks(seq: Sequence, worlds: list, cfg: PipelineConfig, notes: list) -> list:
    masks = []
    ransac = cfg.ransac()
    for k in range(len(worlds)):
        dt = seq.dt(k - 1) if k > 0 else seq.dt(0)
        mask, model = build_mask(worlds[k], _reference_frames(worlds, k, cfg.static_window), dt,
                                 ransac, cfg.static_v_thresh)
        if model is None:
            notes.append({"frame": seq[k].index, "stage": "preprocess", "flags": ["no ground found"]})
        masks.append(mask)
    return masks


def frame_flows(seq: Sequence, worlds: list, masks: list, cfg: PipelineConfig, threads: int = 1) -> list:
    """Forward flow for every frame; the last frame gets its negated backward flow."""
    fcfg = cfg.flow()
    out = []
    n = len(worlds)
    for k in range(n):
        if k + 1 < n:
            f = estimate_frame_flow(worlds[k], worlds[k + 1], masks[k], masks[k + 1], fcfg,
                                    frame_index=k, threads=threads)
        else:
            f = estimate_frame_flow(worlds[k], worlds[k - 1], masks[k], masks[k - 1], fcfg,
                                    frame_index=k, threads=threads).negated()
        log.info("frame %d: %d clusters", k, len(f.flags))
        out.append(f)
    return out


def run_flow(seq: Sequence, cfg: PipelineConfig, threads: int = 1) -> RunResult:
    if len(seq) < 2:
        raise ValueError("flow needs a sequence of at least 2 frames")
    timings, notes = {}, []
    t0 = time.perf_counter()
    worlds = [to_world(f) for f in seq.frames]
    masks = motion_masks(seq, worlds, cfg, notes)
    timings["preprocess"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    flows = frame_flows(seq, worlds, masks, cfg, threads)
    timings["flow"] = time.perf_counter() - t0
    return RunResult(worlds, masks, flows, timings=timings, notes=notes)


def run_label(seq: Sequence, cfg: PipelineConfig, threads: int = 1) -> RunResult:
    res = run_flow(seq, cfg, threads)
    t0 = time.perf_counter()
    dts = [seq.dt(k) for k in range(len(seq))]
    tracks, _ = autolabel_sequence(res.worlds, [f.flow for f in res.flows], dts, cfg.autolabel())
    res.timings["autolabel"] = time.perf_counter() - t0
    res.tracks = tracks
    # Tracks index frames by position; map back to the sequence's own frame indices.
    index = [f.index for f in seq.frames]
    res.labels = [LabelRow(index[r.frame], r.track_id, r.box, r.source, r.flags, r.score)
                  for r in track_labels(tracks)]
    return res


def sequence_digest(root) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).iterdir()):
        if p.name in ("meta.json", "poses.jsonl") or p.suffix == ".pts":
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_outputs(res: RunResult, seq: Sequence, cfg: PipelineConfig, out, command: str,
                  seq_path=None, threads: int = 1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for frame, f in zip(seq.frames, res.flows):
        save_flow(f, out / f"flow_{frame.index:06d}.bin")
    if command == "label":
        export_labels(res.labels, out / "labels.jsonl")
    res.timings["write"] = time.perf_counter() - t0

    cluster_flags = []
    for frame, f in zip(seq.frames, res.flows):
        for c in f.flags:
            cluster_flags.append(dict(c, frame=frame.index))
    registration = [{"track_id": tr.track_id, "frame": seq.frames[k].index, "flags": flags}
                    for tr in res.tracks for k, flags in sorted(tr.flags.items()) if flags]
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.tree,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "threads": threads,
        "sequence": {"path": str(seq_path) if seq_path else None, "id": seq.seq_id,
                     "frames": len(seq), "sha256": sequence_digest(seq_path) if seq_path else None},
        "stage_seconds": res.timings,
        "counts": {"points": [int(len(w)) for w in res.worlds],
                   "dynamic": [int(np.count_nonzero(m == DYNAMIC)) for m in res.masks],
                   "tracks": len(res.tracks), "labels": len(res.labels)},
        "cluster_flags": [c for c in cluster_flags if c.get("flags")],
        "clusters": cluster_flags,
        "registration_flags": registration,
        "notes": res.notes,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def flows_for(seq: Sequence, directory) -> list[FlowField]:
    d = Path(directory)
    return [load_flow(d / f"flow_{f.index:06d}.bin", len(f.points)) for f in seq.frames]


def gt_detections(gt: GroundTruth, min_speed_mps: float = 1.0) -> list[Detection]:
    """True boxes of moving objects that have at least one point in their frame."""
    out = []
    for k, ft in enumerate(gt.frames):
        has_points = ft.point_track.size > 0 and np.any(ft.point_track >= 0)
        for box, tid, speed in zip(ft.boxes, ft.track_ids, ft.speeds):
            if speed < min_speed_mps:
                continue
            if has_points and ft.num_points(tid) == 0:
                continue
            out.append(Detection(k, box))
    return out


def evaluate(labels: list, gt: GroundTruth, metrics_cfg: dict, seq: Sequence | None = None,
             flows: list | None = None):
    """Detection scores of label rows against moving true boxes, plus flow scores if given.

    Returns ``(report, det)``: the JSON-ready report and the raw detection result.
    """
    iou_fn = iou3d if metrics_cfg.get("iou", "3d") == "3d" else bev_iou
    thresh = metrics_cfg.get("iou_thresh", 0.4)
    preds = [Detection(r.frame, r.box, r.score) for r in labels]
    gts = gt_detections(gt, metrics_cfg.get("min_speed_mps", 1.0))
    det = detection_eval(preds, gts, thresh, iou_fn)
    subst = oracle_substitution(preds, gts, thresh, iou_fn)
    flow_all = flow_obj = None
    if flows is not None:
        if seq is None:
            raise ValueError("flow evaluation needs the sequence for frame intervals")
        edges = tuple(metrics_cfg.get("speed_edges", SPEED_EDGES))
        pred, true, dts, obj = [], [], [], []
        for k, (frame, f) in enumerate(zip(seq.frames, flows)):
            ft = gt.frames[k]
            if len(ft.point_flow) != len(f.flow):
                raise ValueError(f"frame {frame.index}: {len(f.flow)} flow vectors for "
                                 f"{len(ft.point_flow)} ground-truth points")
            pred.append(f.flow)
            true.append(ft.point_flow)
            dts.append(np.full(len(f.flow), seq.dt(k)))
            obj.append(ft.point_track >= 0)
        pred, true, dts, obj = (np.concatenate(a) for a in (pred, true, dts, obj))
        flow_all = flow_metrics(pred, true, dts, edges)
        flow_obj = flow_metrics(pred[obj], true[obj], dts[obj], edges)
    report = build_report(det, flow_all, subst, extra={
        "flow_objects": flow_obj.to_dict() if flow_obj is not None else None,
        "metrics_config": dict(metrics_cfg)})
    return report, det
