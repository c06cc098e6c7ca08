"""Evaluation: scene-flow accuracy, speed-bin IoU, detection AP and error breakdowns."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box7, iou3d, wrap_angle

SPEED_EDGES = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0)   # m/s; the last bin is open-ended


def bin_labels(edges=SPEED_EDGES) -> list[str]:
    hi = list(edges[1:]) + [math.inf]
    return [f"{lo:g}-{h:g}" if math.isfinite(h) else f"{lo:g}+" for lo, h in zip(edges, hi)]


def speed_bin(speed, edges=SPEED_EDGES) -> np.ndarray:
    """Bin index per speed; a speed equal to an edge belongs to the bin above it."""
    idx = np.searchsorted(np.asarray(edges), np.asarray(speed, float), side="right") - 1
    return np.clip(idx, 0, len(edges) - 1)


@dataclass
class FlowEval:
    epe3d: float
    acc5: float
    acc10: float
    theta: float | None
    bin_iou: list
    miou: float | None
    n_points: int
    confusion: dict = field(default_factory=dict)   # per bin: tp, fp, fn
    bins: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def flow_metrics(pred, gt, dt, edges=SPEED_EDGES) -> FlowEval:
    """Point-wise flow metrics for aligned (N, 3) predicted and true flows.

    ``dt`` is the frame interval in seconds, a scalar or one value per point.

    EPE3D is the mean end-point error; Acc5/Acc10 are the percentages of points
    with error below 5/10 cm or relative error below 5/10 %. The mean angle
    ignores pairs where either vector is shorter than 1e-6. Speed bins classify
    every point by predicted and by true speed; a bin's IoU is
    TP / (TP + FP + FN) and is None when the bin is empty on both sides.
    """
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"flow arrays must be aligned (N, 3); got {pred.shape} and {gt.shape}")
    dt = np.asarray(dt, float)
    if np.any(dt <= 0) or dt.ndim > 1 or (dt.ndim == 1 and len(dt) != len(pred)):
        raise ValueError("dt must be positive, scalar or one value per point")
    n = len(pred)
    nb = len(edges)
    labels = bin_labels(edges)
    if n == 0:
        return FlowEval(math.nan, math.nan, math.nan, None, [None] * nb, None, 0, {}, labels)

    err = np.linalg.norm(pred - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    rel = err / np.maximum(gt_norm, 1e-6)
    acc5 = 100.0 * float(np.mean((err < 0.05) | (rel < 0.05)))
    acc10 = 100.0 * float(np.mean((err < 0.1) | (rel < 0.1)))

    pred_norm = np.linalg.norm(pred, axis=1)
    ok = (pred_norm >= 1e-6) & (gt_norm >= 1e-6)
    theta = None
    if np.any(ok):
        cos = np.sum(pred[ok] * gt[ok], axis=1) / (pred_norm[ok] * gt_norm[ok])
        theta = float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))

    pb = speed_bin(pred_norm / dt, edges)
    gb = speed_bin(gt_norm / dt, edges)
    ious, confusion = [], {}
    for b in range(nb):
        tp = int(np.count_nonzero((pb == b) & (gb == b)))
        fp = int(np.count_nonzero((pb == b) & (gb != b)))
        fn = int(np.count_nonzero((pb != b) & (gb == b)))
        confusion[labels[b]] = {"tp": tp, "fp": fp, "fn": fn}
        ious.append(tp / (tp + fp + fn) if tp + fp + fn else None)
    present = [v for v in ious if v is not None]
    miou = float(np.mean(present)) if present else None
    return FlowEval(float(err.mean()), acc5, acc10, theta, ious, miou, n, confusion, labels)


# -- detection ----------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    frame: int
    box: Box7
    score: float = 1.0


@dataclass
class DetEval:
    precision: float
    recall: float
    ap: float
    aph: float
    n_pred: int
    n_gt: int
    tp: int
    iou_thresh: float
    pr_curve: list = field(default_factory=list)           # (recall, precision) per prediction
    errors: dict = field(default_factory=dict)             # localization/size/orientation samples

    def to_dict(self) -> dict:
        return asdict(self)


def _as_detections(items, default_score=1.0) -> list[Detection]:
    out = []
    for it in items:
        if isinstance(it, Detection):
            out.append(it)
        elif hasattr(it, "frame") and hasattr(it, "box"):
            out.append(Detection(int(it.frame), it.box, float(getattr(it, "score", default_score))))
        else:
            frame, box, *rest = it
            out.append(Detection(int(frame), box, float(rest[0]) if rest else default_score))
    return out


def average_precision(recall, precision) -> float:
    """Area under the precision-recall curve with the precision envelope."""
    r = np.concatenate([[0.0], np.asarray(recall, float)])
    p = np.concatenate([[0.0], np.asarray(precision, float)])
    if len(r) == 1:
        return 0.0
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * env[1:]))


def box_errors(pred: Box7, gt: Box7) -> tuple[float, float, float]:
    """(localization, size, orientation) error; size is the largest per-dimension gap."""
    loc = math.dist(pred.center, gt.center)
    size = max(abs(pred.length - gt.length), abs(pred.width - gt.width), abs(pred.height - gt.height))
    orient = abs(wrap_angle(pred.heading - gt.heading))
    return loc, size, orient


def best_overlap(preds, gts, iou_fn=iou3d) -> list:
    """For each prediction, the same-frame true box of highest positive IoU (or None)."""
    by_frame: dict[int, list[Detection]] = {}
    for g in gts:
        by_frame.setdefault(g.frame, []).append(g)
    out = []
    for p in preds:
        best, best_iou = None, 0.0
        for g in by_frame.get(p.frame, []):
            v = iou_fn(p.box, g.box)
            if v > best_iou:
                best, best_iou = g, v
        out.append(best)
    return out


def detection_eval(preds, gts, iou_thresh: float = 0.4, iou_fn=iou3d) -> DetEval:
    """Greedy score-ordered matching of predicted to true boxes within each frame.

    Predictions are visited by descending score, ties by (frame, input index);
    each takes the unmatched true box of highest IoU if it reaches the
    threshold. Heading-weighted AP (APH) credits each true positive with
    ``1 - |heading error| / pi``. Error samples pair every prediction that
    overlaps some true box with its highest-IoU partner, whatever the threshold.
    """
    preds, gts = _as_detections(preds), _as_detections(gts)
    by_frame: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_frame.setdefault(g.frame, []).append(j)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].frame, i))
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(preds))
    weight = np.zeros(len(preds))
    for rank, i in enumerate(order):
        p = preds[i]
        best, best_iou = -1, -1.0
        for j in by_frame.get(p.frame, []):
            if taken[j]:
                continue
            v = iou_fn(p.box, gts[j].box)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            tp[rank] = 1.0
            weight[rank] = 1.0 - abs(wrap_angle(p.box.heading - gts[best].box.heading)) / math.pi

    n_pred, n_gt = len(preds), len(gts)
    ctp = np.cumsum(tp)
    cw = np.cumsum(weight)
    k = np.arange(1, n_pred + 1)
    if n_gt and n_pred:
        rec, prec = ctp / n_gt, ctp / k
        ap = average_precision(rec, prec)
        aph = average_precision(rec, cw / k)
    else:
        rec, prec, ap, aph = np.zeros(n_pred), np.zeros(n_pred), 0.0, 0.0
    n_tp = int(tp.sum())

    errors = {"localization": [], "size": [], "orientation": []}
    for p, g in zip(preds, best_overlap(preds, gts, iou_fn)):
        if g is not None:
            loc, size, orient = box_errors(p.box, g.box)
            errors["localization"].append(loc)
            errors["size"].append(size)
            errors["orientation"].append(orient)
    return DetEval(
        precision=n_tp / n_pred if n_pred else 0.0,
        recall=n_tp / n_gt if n_gt else 0.0,
        ap=ap, aph=aph, n_pred=n_pred, n_gt=n_gt, tp=n_tp, iou_thresh=iou_thresh,
        pr_curve=[(float(r), float(q)) for r, q in zip(rec, prec)],
        errors=errors,
    )


SUBSTITUTIONS = {
    "oracle": "GT localization + GT size + GT orientation",
    "pred_localization": "Predicted localization + GT size + GT orientation",
    "pred_size": "GT localization + Predicted size + GT orientation",
    "pred_orientation": "GT localization + GT size + Predicted orientation",
}


def _substitute(pred: Box7, gt: Box7, keep: str) -> Box7:
    if keep == "oracle":
        return gt
    if keep == "pred_localization":
        return gt.replace(cx=pred.cx, cy=pred.cy, cz=pred.cz)
    if keep == "pred_size":
        return gt.replace(length=pred.length, width=pred.width, height=pred.height)
    if keep == "pred_orientation":
        return gt.replace(heading=pred.heading)
    raise ValueError(keep)


def oracle_substitution(preds, gts, iou_thresh: float = 0.4, iou_fn=iou3d) -> dict:
    """Re-score predictions with parts of each box replaced by its best-overlap true box.

    Predictions overlapping no true box stay as they are. Returns, per variant,
    its description with AP and APH.
    """
    preds, gts = _as_detections(preds), _as_detections(gts)
    partner = best_overlap(preds, gts, iou_fn)
    table = {}
    for key, desc in SUBSTITUTIONS.items():
        variant = [Detection(p.frame, _substitute(p.box, g.box, key) if g is not None else p.box, p.score)
                   for p, g in zip(preds, partner)]
        ev = detection_eval(variant, gts, iou_thresh, iou_fn)
        table[key] = {"description": desc, "ap": ev.ap, "aph": ev.aph}
    return table


# -- reports -------------------------------------------------------------------------

def histogram(values, bins: int = 20, upper: float | None = None) -> dict:
    v = np.asarray(values, float)
    if len(v) == 0:
        return {"edges": [], "counts": []}
    hi = upper if upper is not None else float(v.max()) or 1.0
    counts, edges = np.histogram(v, bins=bins, range=(0.0, hi))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def build_report(det: DetEval | None = None, flow: FlowEval | None = None,
                 substitution: dict | None = None, extra: dict | None = None) -> dict:
    report = {}
    if flow is not None:
        report["flow"] = flow.to_dict()
    if det is not None:
        d = det.to_dict()
        errors = d.pop("errors")
        d.pop("pr_curve")
        d["error_summary"] = {k: {"n": len(v), "mean": float(np.mean(v)) if v else None,
                                  "median": float(np.median(v)) if v else None}
                              for k, v in errors.items()}
        report["detection"] = d
    if substitution is not None:
        report["oracle_substitution"] = substitution
    if extra:
        report.update(extra)
    return _clean(report)


def write_report(report: dict, path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return out


def write_csvs(det: DetEval, directory) -> list[Path]:
    """PR curve and binned error histograms as CSV files for external plotting."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pr = d / "pr_curve.csv"
    with open(pr, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "recall", "precision"])
        for i, (r, p) in enumerate(det.pr_curve, 1):
            w.writerow([i, f"{r:.6f}", f"{p:.6f}"])
    hist = d / "error_histograms.csv"
    uppers = {"localization": 2.0, "size": 2.0, "orientation": math.pi}
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["error", "bin_lo", "bin_hi", "count"])
        for name, values in det.errors.items():
            h = histogram(values, 20, uppers[name])
            for lo, hi, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
                w.writerow([name, f"{lo:.4f}", f"{hi:.4f}", c])
    return [pr, hist]
