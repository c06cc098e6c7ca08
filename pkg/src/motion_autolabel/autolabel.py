"""Auto labeling of moving objects from scene flow.

Per frame, points are clustered jointly by position and flow into visible
boxes. Boxes are linked over time by a flow-advanced Hungarian tracker, and
each track's partial views are registered with a yaw-only ICP into one
aggregate shape whose box is propagated back to every frame as an amodal box.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN

from .geometry import (
    Box7,
    NNIndex,
    RigidTransform,
    as_points,
    bev_iou,
    box_with_heading,
    fit_box,
    min_area_box_along_direction,
    transform_box,
    wrap_angle,
)

log = logging.getLogger(__name__)

LABEL_HEADER = "# motion-autolabel labels v1: frame, track_id, box [cx, cy, cz, l, w, h, heading], source, flags"


class InsufficientOverlap(RuntimeError):
    pass


@dataclass
class AutolabelConfig:
    eps_p_m: float = 1.0
    eps_f: float = 0.1               # meters per frame, flow space
    f_min_mps: float = 1.0
    min_pts: int = 5
    match_iou: float = 0.1
    max_misses: int = 2
    min_track_len: int = 3
    icp_max_iters: int = 50
    icp_tol: float = 1e-6
    icp_grid: int = 5
    cap_factor: float = 2.0          # correspondence cap as a multiple of median target spacing
    cap_starts_m: tuple = (None, 1.0)  # ICP schedules tried per init: fixed cap, coarse-to-fine
    cap_decay: float = 0.7
    select: str = "truncated"        # grid winner: "truncated" mean or "matched" mean distance
    ema: float = 0.5                 # smoothing for dims, z and heading in the tracker
    min_track_speed_mps: float = 0.5  # tracks whose boxes move slower are dropped; 0 disables


# -- object proposals ----------------------------------------------------------

@dataclass
class Proposal:
    frame: int
    indices: np.ndarray      # into the frame's points
    points: np.ndarray
    mean_flow: np.ndarray
    box: Box7

    @property
    def heading(self) -> float:
        return self.box.heading


def propose_objects(points, flow, dt: float, cfg: AutolabelConfig | None = None,
                    frame: int = 0) -> list[Proposal]:
    """Joint position/flow clustering of moving points into visible boxes.

    Points slower than ``f_min_mps`` are dropped; the survivors are clustered
    separately by position (``eps_p_m``) and by flow vector (``eps_f``), and
    every non-empty intersection of a position cluster with a flow cluster
    (at least ``min_pts`` points) becomes a proposal. Points that are noise in
    either clustering are discarded.
    """
    cfg = cfg or AutolabelConfig()
    pts, fl = as_points(points), as_points(flow)
    if len(pts) != len(fl):
        raise ValueError("points and flow must be aligned")
    speed = np.linalg.norm(fl, axis=1) / dt
    keep = np.nonzero(speed >= cfg.f_min_mps)[0]
    if len(keep) == 0:
        return []
    by_pos = DBSCAN(eps=cfg.eps_p_m, min_samples=cfg.min_pts).fit_predict(pts[keep])
    by_flow = DBSCAN(eps=cfg.eps_f, min_samples=cfg.min_pts).fit_predict(fl[keep])
    valid = (by_pos >= 0) & (by_flow >= 0)
    pairs = sorted({(int(i), int(j)) for i, j in zip(by_pos[valid], by_flow[valid])})
    out = []
    for i, j in pairs:
        members = keep[(by_pos == i) & (by_flow == j)]
        if len(members) < cfg.min_pts:
            continue
        cluster = pts[members]
        mean_flow = fl[members].mean(axis=0)
        try:
            box = min_area_box_along_direction(cluster, mean_flow[:2])
        except ValueError:
            box = fit_box(cluster)
        out.append(Proposal(frame, members, cluster, mean_flow, box))
    return out


# -- tracking -------------------------------------------------------------------

class BevKalman:
    """Constant-velocity filter over (x, y, vx, vy), velocities in meters per frame."""

    def __init__(self, xy, q: float = 0.05, r: float = 0.1):
        self.x = np.array([xy[0], xy[1], 0.0, 0.0])
        self.P = np.diag([r, r, 1.0, 1.0])
        self.F = np.eye(4)
        self.F[0, 2] = self.F[1, 3] = 1.0
        self.H = np.eye(2, 4)
        self.Q = q * np.eye(4)
        self.R = r * np.eye(2)

    def predict(self, displacement=None):
        """Advance one frame; a flow-derived displacement overrides the velocity model."""
        if displacement is None:
            self.x = self.F @ self.x
        else:
            self.x = self.x.copy()
            self.x[:2] += displacement
            self.x[2:] = displacement
        self.P = self.F @ self.P @ self.F.T + self.Q
        return self.x[:2].copy()

    def update(self, xy):
        y = np.asarray(xy, float) - self.H @ self.x
        S = self.H @ self.P @ self.H.T + self.R
        K = self.P @ self.H.T @ np.linalg.inv(S)
        self.x = self.x + K @ y
        self.P = (np.eye(4) - K @ self.H) @ self.P


@dataclass
class Observation:
    frame: int
    points: np.ndarray
    box: Box7                # visible box
    heading: float
    indices: np.ndarray


@dataclass
class Track:
    track_id: int
    observations: list = field(default_factory=list)
    refined: dict = field(default_factory=dict)     # frame -> amodal Box7
    flags: dict = field(default_factory=dict)       # frame -> list of str

    @property
    def frames(self) -> list[int]:
        return [o.frame for o in self.observations]

    def __len__(self):
        return len(self.observations)


class _LiveTrack:
    def __init__(self, track: Track, prop: Proposal, ema: float):
        self.track, self.ema = track, ema
        self.kf = BevKalman(prop.box.center[:2])
        self.box = prop.box
        self.misses = 0
        self.add(prop)

    def add(self, prop: Proposal):
        self.track.observations.append(
            Observation(prop.frame, prop.points, prop.box, prop.box.heading, prop.indices))

    def advance(self, points_prev, flow_prev):
        """Move the box by the mean flow of the moving points it contains."""
        inside = self.box.contains(points_prev) if len(points_prev) else np.zeros(0, bool)
        moving = inside & np.any(flow_prev != 0, axis=1) if len(points_prev) else inside
        disp = flow_prev[moving].mean(axis=0)[:2] if np.any(moving) else None
        xy = self.kf.predict(disp)
        self.box = self.box.replace(cx=float(xy[0]), cy=float(xy[1]))
        return self.box

    def correct(self, prop: Proposal):
        self.kf.update(prop.box.center[:2])
        a, b = self.ema, self.box
        m = prop.box
        heading = b.heading + a * wrap_angle(m.heading - b.heading)
        self.box = Box7(float(self.kf.x[0]), float(self.kf.x[1]), (1 - a) * b.cz + a * m.cz,
                        (1 - a) * b.length + a * m.length, (1 - a) * b.width + a * m.width,
                        (1 - a) * b.height + a * m.height, heading)
        self.misses = 0
        self.add(prop)


def track(proposals: list[list[Proposal]], points: list, flows: list,
          cfg: AutolabelConfig | None = None) -> list[Track]:
    """Link per-frame proposals into tracks.

    ``proposals[t]`` are frame t's proposals; ``points[t]`` and ``flows[t]`` are
    that frame's world points and flow toward t+1, used to advance live boxes.
    """
    cfg = cfg or AutolabelConfig()
    live: list[_LiveTrack] = []
    done: list[Track] = []
    next_id = 0
    for t, props in enumerate(proposals):
        if t > 0:
            for lt in live:
                lt.advance(as_points(points[t - 1]), as_points(flows[t - 1]))
        cost = np.ones((len(live), len(props)))
        for a, lt in enumerate(live):
            for b, p in enumerate(props):
                cost[a, b] = 1.0 - bev_iou(lt.box, p.box)
        matched_tracks, matched_props = set(), set()
        if cost.size:
            rows, cols = linear_sum_assignment(cost)
            for a, b in zip(rows, cols):
                if 1.0 - cost[a, b] >= cfg.match_iou:
                    live[a].correct(props[b])
                    matched_tracks.add(a)
                    matched_props.add(b)
        survivors = []
        for a, lt in enumerate(live):
            if a not in matched_tracks:
                lt.misses += 1
            if lt.misses > cfg.max_misses:
                done.append(lt.track)
            else:
                survivors.append(lt)
        live = survivors
        for b, p in enumerate(props):
            if b not in matched_props:
                live.append(_LiveTrack(Track(next_id), p, cfg.ema))
                next_id += 1
    done.extend(lt.track for lt in live)
    kept = [tr for tr in done if len(tr) >= cfg.min_track_len]
    return sorted(kept, key=lambda tr: tr.track_id)


def track_speed(tr: Track, times) -> float:
    """Least-squares BEV speed of the visible box centres over the track (m/s)."""
    t = np.array([times[f] for f in tr.frames], float)
    xy = np.array([o.box.center[:2] for o in tr.observations])
    if len(t) < 2 or np.ptp(t) == 0:
        return 0.0
    tc = t - t.mean()
    slope = (tc @ (xy - xy.mean(axis=0))) / (tc @ tc)
    return float(np.linalg.norm(slope))


def drop_stationary(tracks: list[Track], times, min_speed: float) -> list[Track]:
    """Remove tracks whose flow said "moving" but whose boxes stay put."""
    if min_speed <= 0:
        return tracks
    kept = []
    for tr in tracks:
        v = track_speed(tr, times)
        if v >= min_speed:
            kept.append(tr)
        else:
            log.info("track %d dropped: boxes move at %.2f m/s", tr.track_id, v)
    return kept


# -- registration --------------------------------------------------------------------

def median_spacing(points) -> float:
    pts = as_points(points)
    if len(pts) < 2:
        return 0.0
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


def _yaw_procrustes(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares yaw + translation taking src onto dst (xy rotation, mean z shift)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src[:, :2] - cs[:2], dst[:, :2] - cd[:2]
    s = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    c = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    yaw = math.atan2(s, c)
    rot = RigidTransform.from_yaw(yaw).rotation
    trans = cd - rot @ cs
    return RigidTransform(rot, trans)


def yaw_icp(source, target, init: RigidTransform | None = None, max_iters: int = 50,
            tol: float = 1e-6, cap: float | None = None, target_index: NNIndex | None = None,
            cap_start: float | None = None, cap_decay: float = 0.7):
    """Yaw-constrained ICP taking ``source`` onto ``target``.

    Each iteration matches every transformed source point to its nearest
    target point, keeps matches within the correspondence cap, and solves the
    closed-form yaw + translation fit. With ``cap_start`` the cap shrinks
    geometrically from that value to ``cap`` (coarse-to-fine), which widens the
    basin of convergence without loosening the final fit.

    Returns ``(transform, eps)`` with ``eps`` the mean distance over the final
    correspondences within ``cap``. Raises ``InsufficientOverlap`` when fewer
    than three correspondences fall within the cap.
    """
    src = as_points(source)
    index = target_index or NNIndex(target)
    tgt = index.points
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("yaw_icp needs non-empty source and target")
    cap = math.inf if cap is None else cap
    current = init or RigidTransform.identity()

    def correspond(tf, c):
        d2, idx = index.query(tf.apply(src))
        d = np.sqrt(d2)
        ok = d <= c
        if np.count_nonzero(ok) < 3:
            raise InsufficientOverlap("insufficient overlap")
        return d, idx, ok

    level = cap if cap_start is None else max(cap, cap_start)
    d, idx, ok = correspond(current, level)
    eps = math.inf
    for _ in range(max_iters):
        current = _yaw_procrustes(src[ok], tgt[idx[ok]])
        final = level <= cap
        level = max(cap, level * cap_decay)
        d, idx, ok = correspond(current, level)
        new_eps = float(d[ok].mean())
        converged = final and abs(eps - new_eps) < tol
        eps = new_eps
        if converged:
            break
    if level > cap:
        d, idx, ok = correspond(current, cap)
        eps = float(d[ok].mean())
    return current, eps


def truncated_error(source, tf: RigidTransform, index: NNIndex, cap: float) -> float:
    """Mean of min(distance, cap) over every source point."""
    d2, _ = index.query(tf.apply(as_points(source)))
    return float(np.mean(np.minimum(np.sqrt(d2), cap)))


def search_grid(box: Box7, n: int = 5) -> list[np.ndarray]:
    """Translation inits spanning the box footprint along its own length and width axes."""
    fractions = np.linspace(-0.5, 0.5, n)
    c, s = math.cos(box.heading), math.sin(box.heading)
    out = []
    for fx in fractions:
        for fy in fractions:
            dx, dy = fx * box.length, fy * box.width
            out.append(np.array([c * dx - s * dy, s * dx + c * dy, 0.0]))
    return out


@dataclass
class Registration:
    target: np.ndarray                 # merged object-centred points
    transforms: dict                   # observation position -> RigidTransform (normalised frames)
    errors: dict                       # observation position -> eps
    unregistered: list


def register_track(clusters: list, boxes: list, headings: list,
                   cfg: AutolabelConfig | None = None) -> Registration:
    """Sequential registration of centred partial views onto the densest one."""
    cfg = cfg or AutolabelConfig()
    centred = [as_points(c) - as_points(c).mean(axis=0) for c in clusters]
    L = len(centred)
    hat = int(np.argmax([len(c) for c in centred]))
    order = list(range(hat + 1, L)) + list(range(hat - 1, -1, -1))
    target = centred[hat]
    theta_tgt = headings[hat]
    transforms = {hat: RigidTransform.identity()}
    errors = {hat: 0.0}
    unregistered = []
    # The cap follows the seed view's sampling density; the merged target only gets
    # denser, and a cap shrinking with it would drop below the noise level.
    cap = cfg.cap_factor * median_spacing(target) if len(target) > 1 else None
    for i in order:
        index = NNIndex(target)
        # Search range spans the current (merged) target, so it grows with the aggregate.
        grid = search_grid(box_with_heading(target, theta_tgt), cfg.icp_grid)
        rot = RigidTransform.from_yaw(wrap_angle(theta_tgt - headings[i])).rotation
        best = None
        for tj, start in ((tj, start) for tj in grid for start in cfg.cap_starts_m):
            try:
                tf, eps = yaw_icp(centred[i], None, RigidTransform(rot, tj), cfg.icp_max_iters,
                                  cfg.icp_tol, cap, index, start, cfg.cap_decay)
            except InsufficientOverlap:
                continue
            score = eps if cfg.select == "matched" else truncated_error(centred[i], tf, index, cap)
            if best is None or score < best[2]:
                best = (tf, eps, score)
        if best is None:
            unregistered.append(i)
            continue
        transforms[i], errors[i] = best[0], best[1]
        target = np.vstack([target, best[0].apply(centred[i])])
    return Registration(target, transforms, errors, unregistered)


def register_and_refine(tr: Track, cfg: AutolabelConfig | None = None) -> Track:
    """Fill ``tr.refined`` with amodal boxes; unregistered frames keep their visible box."""
    cfg = cfg or AutolabelConfig()
    obs = tr.observations
    if len(obs) < 2:
        for o in obs:
            tr.refined[o.frame] = o.box
            tr.flags.setdefault(o.frame, []).append("unregistered")
        return tr
    clusters = [o.points for o in obs]
    reg = register_track(clusters, [o.box for o in obs], [o.heading for o in obs], cfg)
    hat = int(np.argmax([len(c) for c in clusters]))
    centroid_tgt = as_points(clusters[hat]).mean(axis=0)
    theta_tgt = obs[hat].heading
    aggregate = reg.target + centroid_tgt
    amodal_tgt = box_with_heading(aggregate, theta_tgt)
    local_tgt = amodal_tgt.replace(cx=amodal_tgt.cx - centroid_tgt[0], cy=amodal_tgt.cy - centroid_tgt[1],
                                   cz=amodal_tgt.cz - centroid_tgt[2])
    for pos, o in enumerate(obs):
        if pos in reg.unregistered:
            tr.refined[o.frame] = o.box
            tr.flags.setdefault(o.frame, []).append("unregistered")
            continue
        local = transform_box(local_tgt, reg.transforms[pos].inverse())
        c = as_points(o.points).mean(axis=0)
        tr.refined[o.frame] = local.replace(cx=local.cx + c[0], cy=local.cy + c[1], cz=local.cz + c[2])
    return tr


# -- label files -----------------------------------------------------------------

@dataclass(frozen=True)
class LabelRow:
    frame: int
    track_id: int
    box: Box7
    source: str
    flags: tuple = ()
    score: float = 1.0

    def to_json(self) -> dict:
        return {"frame": self.frame, "track_id": self.track_id, "box": self.box.to_list(),
                "source": self.source, "flags": list(self.flags)}


def track_labels(tracks: list[Track]) -> list[LabelRow]:
    rows = []
    for tr in tracks:
        for o in tr.observations:
            flags = tuple(tr.flags.get(o.frame, ()))
            if o.frame in tr.refined and "unregistered" not in flags:
                rows.append(LabelRow(o.frame, tr.track_id, tr.refined[o.frame], "amodal", flags))
            else:
                rows.append(LabelRow(o.frame, tr.track_id, o.box, "visible", flags))
    return sorted(rows, key=lambda r: (r.frame, r.track_id))


def export_labels(tracks_or_rows, path) -> Path:
    rows = tracks_or_rows
    if rows and isinstance(rows[0], Track):
        rows = track_labels(rows)
    rows = sorted(rows, key=lambda r: (r.frame, r.track_id))
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write(LABEL_HEADER + "\n")
            for r in rows:
                fh.write(json.dumps(r.to_json()) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write labels to {out}: {exc}") from exc
    return out


class LabelFormatError(ValueError):
    pass


def import_labels(path) -> list[LabelRow]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                d = json.loads(line)
                box = Box7.from_array(d["box"])
                source = d.get("source", "visible")
                if source not in ("visible", "amodal"):
                    raise ValueError(f"unknown source {source!r}")
                rows.append(LabelRow(int(d["frame"]), int(d["track_id"]), box, source,
                                     tuple(d.get("flags", ())), float(d.get("score", 1.0))))
            except (KeyError, TypeError, ValueError) as exc:
                raise LabelFormatError(f"{path}: row {lineno}: {exc}") from exc
    return rows


# -- driver -----------------------------------------------------------------------

def autolabel_sequence(points: list, flows: list, dts: list, cfg: AutolabelConfig | None = None):
    """Proposals, tracking and registration over a whole sequence.

    ``flows[t]`` is frame t's flow toward frame t+1 (world frame, meters);
    ``dts[t]`` the matching interval in seconds.
    """
    cfg = cfg or AutolabelConfig()
    proposals = [propose_objects(p, f, dt, cfg, frame=t)
                 for t, (p, f, dt) in enumerate(zip(points, flows, dts))]
    tracks = track(proposals, points, flows, cfg)
    times = np.concatenate([[0.0], np.cumsum(dts[:-1])])
    tracks = drop_stationary(tracks, times, cfg.min_track_speed_mps)
    for tr in tracks:
        register_and_refine(tr, cfg)
    return tracks, proposals
