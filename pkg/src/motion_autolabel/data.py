"""Sequences on disk, ego-motion compensation, and a synthetic scene generator.

On-disk layout of a sequence directory::

    frame_000000.pts   little-endian float32 (x, y, z) triples, sensor frame
    poses.jsonl        {"index", "timestamp_s", "rotation": 9 floats row-major,
                        "translation": 3 floats}   sensor -> world
    meta.json          {"id", "hz"}
    gt.jsonl           optional ground truth, world frame (see ``save_ground_truth``)

All flows and boxes are expressed in the world frame.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import Box7, RigidTransform, bev_iou, yaw_matrix

GROUND = -2
BACKGROUND = -1


class SequenceFormatError(ValueError):
    """A sequence directory does not match the documented layout."""


class SceneError(ValueError):
    """A scene recipe is physically inconsistent."""


@dataclass(eq=False)
class Frame:
    index: int
    timestamp: float
    points: np.ndarray
    pose: RigidTransform

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)


@dataclass(eq=False)
class Sequence:
    frames: list[Frame]
    seq_id: str = "seq"
    hz: float = 10.0

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def dt(self, i: int) -> float:
        """Interval between frame i and its successor (predecessor for the last frame)."""
        j = i + 1 if i + 1 < len(self.frames) else i - 1
        return abs(self.frames[j].timestamp - self.frames[i].timestamp)


@dataclass(eq=False)
class FrameTruth:
    boxes: list[Box7]
    track_ids: list[int]
    speeds: list[float]
    point_flow: np.ndarray          # (N, 3) world-frame displacement over one interval
    point_track: np.ndarray         # (N,) track id, BACKGROUND or GROUND

    def num_points(self, track_id: int) -> int:
        return int(np.count_nonzero(self.point_track == track_id))


@dataclass(eq=False)
class GroundTruth:
    frames: list[FrameTruth]

    def __len__(self):
        return len(self.frames)

    def point_speed(self, i: int, dt: float) -> np.ndarray:
        return np.linalg.norm(self.frames[i].point_flow, axis=1) / dt


def to_world(frame: Frame) -> np.ndarray:
    return frame.pose.apply(frame.points)


# --------------------------------------------------------------------- disk I/O


def _pose_row(frame: Frame) -> dict:
    return {
        "index": frame.index,
        "timestamp_s": frame.timestamp,
        "rotation": frame.pose.rotation.reshape(-1).tolist(),
        "translation": frame.pose.translation.tolist(),
    }


def save_sequence(seq: Sequence, path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "meta.json", "w") as fh:
        json.dump({"id": seq.seq_id, "hz": seq.hz}, fh, sort_keys=True)
        fh.write("\n")
    with open(out / "poses.jsonl", "w") as fh:
        for frame in seq.frames:
            fh.write(json.dumps(_pose_row(frame), sort_keys=True) + "\n")
            frame.points.astype("<f4").tofile(out / f"frame_{frame.index:06d}.pts")
    return out


def load_sequence(path) -> Sequence:
    root = Path(path)
    if not root.is_dir():
        raise SequenceFormatError(f"{root}: not a directory")
    try:
        meta = json.loads((root / "meta.json").read_text())
        seq_id, hz = str(meta["id"]), float(meta["hz"])
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise SequenceFormatError(f"{root / 'meta.json'}: {err}") from err

    poses = {}
    pose_file = root / "poses.jsonl"
    if not pose_file.exists():
        raise SequenceFormatError(f"{pose_file}: missing")
    for lineno, line in enumerate(pose_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            idx = int(row["index"])
            pose = RigidTransform(np.array(row["rotation"], float).reshape(3, 3),
                                  np.array(row["translation"], float))
            poses[idx] = (float(row["timestamp_s"]), pose)
        except (ValueError, KeyError, TypeError) as err:
            raise SequenceFormatError(f"{pose_file}:{lineno}: malformed pose row ({err})") from err

    frame_files = sorted(root.glob("frame_*.pts"))
    if not frame_files:
        raise SequenceFormatError(f"{root}: no frame_*.pts files")
    frames = []
    for f in frame_files:
        try:
            idx = int(f.stem.split("_", 1)[1])
        except ValueError as err:
            raise SequenceFormatError(f"{f.name}: cannot parse frame index") from err
        if idx not in poses:
            raise SequenceFormatError(f"frame {idx} ({f.name}): missing pose")
        raw = np.fromfile(f, dtype="<f4")
        if raw.size == 0 or raw.size % 3:
            raise SequenceFormatError(
                f"frame {idx} ({f.name}): malformed point file ({raw.size} floats)")
        pts = raw.reshape(-1, 3).astype(float)
        if not np.all(np.isfinite(pts)):
            raise SequenceFormatError(f"frame {idx} ({f.name}): non-finite coordinates")
        ts, pose = poses[idx]
        frames.append(Frame(idx, ts, pts, pose))
    frames.sort(key=lambda fr: fr.index)
    for prev, cur in zip(frames, frames[1:]):
        if not cur.timestamp > prev.timestamp:
            raise SequenceFormatError(
                f"frame {cur.index}: non-monotone timestamps "
                f"({prev.timestamp} then {cur.timestamp})")
    return Sequence(frames, seq_id, hz)


def save_ground_truth(gt: GroundTruth, path, include_point_flows: bool = True) -> Path:
    """One JSON row per (frame, object); ground points get a ``kind: "ground"`` row."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for fi, ft in enumerate(gt.frames):
            for box, tid, speed in zip(ft.boxes, ft.track_ids, ft.speeds):
                members = np.nonzero(ft.point_track == tid)[0]
                row = {"frame": fi, "track_id": int(tid), "kind": "object",
                       "box": box.to_list(), "speed_mps": float(speed),
                       "num_points": int(len(members))}
                if include_point_flows:
                    row["point_indices"] = members.tolist()
                    row["point_flows"] = ft.point_flow[members].tolist()
                fh.write(json.dumps(row) + "\n")
            if include_point_flows:
                ground = np.nonzero(ft.point_track == GROUND)[0]
                fh.write(json.dumps({"frame": fi, "track_id": GROUND, "kind": "ground",
                                     "num_points": int(len(ground)),
                                     "point_indices": ground.tolist(),
                                     "n_total": int(len(ft.point_track))}) + "\n")
    return out


def load_ground_truth(path, point_counts: list[int] | None = None) -> GroundTruth:
    """Parse ``gt.jsonl``. ``point_counts`` sizes the per-point arrays of each frame."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            row = json.loads(line)
            int(row["frame"]), int(row["track_id"])
            if row.get("kind", "object") == "object":
                Box7.from_array(row["box"])
        except (ValueError, KeyError, TypeError) as err:
            raise SequenceFormatError(f"{path}:{lineno}: malformed ground-truth row ({err})") from err
        rows.append(row)
    n_frames = max((r["frame"] for r in rows), default=-1) + 1
    if point_counts is not None:
        n_frames = max(n_frames, len(point_counts))
    sizes = list(point_counts) if point_counts is not None else [0] * n_frames
    for r in rows:
        if point_counts is None:
            top = max(r.get("point_indices") or [-1]) + 1
            sizes[r["frame"]] = max(sizes[r["frame"]], top, r.get("n_total", 0))
    frames = [FrameTruth([], [], [], np.zeros((n, 3)), np.full(n, BACKGROUND, dtype=np.int64))
              for n in sizes]
    for r in rows:
        ft = frames[r["frame"]]
        idx = np.asarray(r.get("point_indices") or [], dtype=np.int64)
        if r.get("kind", "object") == "ground":
            ft.point_track[idx] = GROUND
            continue
        ft.boxes.append(Box7.from_array(r["box"]))
        ft.track_ids.append(int(r["track_id"]))
        ft.speeds.append(float(r.get("speed_mps", 0.0)))
        if len(idx):
            ft.point_track[idx] = int(r["track_id"])
            if r.get("point_flows") is not None:
                ft.point_flow[idx] = np.asarray(r["point_flows"], float).reshape(-1, 3)
    return GroundTruth(frames)


# ------------------------------------------------------------------- generator


def _strict(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise SceneError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass
class MotionSegment:
    start_frame: int
    speed: float
    yaw_rate: float = 0.0


@dataclass
class ObjectSpec:
    """A rigid box-shaped mover. ``x, y, heading`` are its world pose at frame 0."""

    name: str
    length: float
    width: float
    height: float
    x: float
    y: float
    heading: float = 0.0
    speed: float = 0.0
    yaw_rate: float = 0.0
    segments: list = field(default_factory=list)
    clearance: float = 0.3
    density: float = 12.0            # surface points per m^2 at the reference range
    slice_fraction: float | None = None  # visible fraction of the length, sweeping per frame
    slice_period: int | None = None      # frames per sweep from rear to front; None = whole sequence
    shape: str = "box"               # "box" or "car" (lower body plus a set-back cabin)

    def motion_at(self, frame: int) -> tuple[float, float]:
        speed, yaw_rate = self.speed, self.yaw_rate
        for seg in sorted(self.segments, key=lambda s: s.start_frame):
            if frame >= seg.start_frame:
                speed, yaw_rate = seg.speed, seg.yaw_rate
        return speed, yaw_rate


@dataclass
class StaticSpec:
    """Static box primitive (wall, pole, parked obstacle) resting on the ground."""

    length: float
    width: float
    height: float
    x: float
    y: float
    heading: float = 0.0
    density: float = 8.0


@dataclass
class SceneRecipe:
    objects: list[ObjectSpec]
    statics: list[StaticSpec] = field(default_factory=list)
    n_frames: int = 20
    hz: float = 10.0
    seed: int = 0
    noise_sigma: float = 0.02
    noise_model: str = "range"           # "range": along the sensor ray; "isotropic": per axis
    dropout: float = 0.1
    ego_speed: float = 5.0
    ego_yaw_rate: float = 0.0
    ego_start: tuple = (0.0, 0.0, 0.0)   # x, y, yaw
    sensor_height: float = 1.8
    ground_points: int = 2500
    ground_radius: float = 40.0
    ref_range: float = 15.0
    seq_id: str = "synthetic"

    @classmethod
    def from_dict(cls, data: dict) -> "SceneRecipe":
        data = dict(data)
        objs = []
        for i, o in enumerate(data.pop("objects", [])):
            o = dict(o)
            segs = [_strict(MotionSegment, s, f"objects[{i}].segments") for s in o.pop("segments", [])]
            obj = _strict(ObjectSpec, o, f"objects[{i}]")
            obj.segments = segs
            objs.append(obj)
        statics = [_strict(StaticSpec, s, f"statics[{i}]") for i, s in enumerate(data.pop("statics", []))]
        if "ego_start" in data:
            data["ego_start"] = tuple(data["ego_start"])
        recipe = _strict(cls, dict(data, objects=[]), "scene")
        recipe.objects, recipe.statics = objs, statics
        return recipe


def _advance(x, y, heading, speed, yaw_rate, dt):
    if abs(yaw_rate) < 1e-12:
        return x + speed * dt * math.cos(heading), y + speed * dt * math.sin(heading), heading
    h1 = heading + yaw_rate * dt
    r = speed / yaw_rate
    return x + r * (math.sin(h1) - math.sin(heading)), y - r * (math.cos(h1) - math.cos(heading)), h1


def _box_surface(length, width, height, density, rng, bottom=False):
    """Uniform samples on the side and top faces of a box centred at the origin."""
    hl, hw, hh = length / 2, width / 2, height / 2
    faces = [  # (origin, axis u, axis v)
        ((hl, 0, 0), (0, width, 0), (0, 0, height)),
        ((-hl, 0, 0), (0, width, 0), (0, 0, height)),
        ((0, hw, 0), (length, 0, 0), (0, 0, height)),
        ((0, -hw, 0), (length, 0, 0), (0, 0, height)),
        ((0, 0, hh), (length, 0, 0), (0, width, 0)),
    ]
    if bottom:
        faces.append(((0, 0, -hh), (length, 0, 0), (0, width, 0)))
    return _faces_surface(faces, density, rng)


def _faces_surface(faces, density, rng):
    out = []
    for origin, u, v in faces:
        u, v = np.asarray(u, float), np.asarray(v, float)
        area = np.linalg.norm(u) * np.linalg.norm(v)
        n = max(int(round(area * density)), 1)
        a = rng.uniform(-0.5, 0.5, size=(n, 1))
        b = rng.uniform(-0.5, 0.5, size=(n, 1))
        out.append(np.asarray(origin, float) + a * u + b * v)
    return np.vstack(out)


CABIN = (-0.35, 0.15)   # cabin extent as fractions of the length
BELT = 0.5              # lower-body height as a fraction of the total height


def _car_surface(length, width, height, density, rng):
    """Car-like profile: full-length lower body with bonnet and boot, cabin set back.

    The bounding box is the same as the plain box of equal dimensions, but the
    cabin steps give features along the length that anchor registration.
    """
    hl, hw, hh = length / 2, width / 2, height / 2
    belt = -hh + BELT * height
    lo_h = belt + hh
    lo_c = (belt - hh) / 2
    c0, c1 = CABIN[0] * length, CABIN[1] * length
    cab_h = hh - belt
    cab_c = (hh + belt) / 2
    cab_x = (c0 + c1) / 2
    cab_l = c1 - c0
    bonnet_l, boot_l = hl - c1, c0 + hl
    faces = [
        ((hl, 0, lo_c), (0, width, 0), (0, 0, lo_h)),
        ((-hl, 0, lo_c), (0, width, 0), (0, 0, lo_h)),
        ((0, hw, lo_c), (length, 0, 0), (0, 0, lo_h)),
        ((0, -hw, lo_c), (length, 0, 0), (0, 0, lo_h)),
        (((c1 + hl) / 2, 0, belt), (bonnet_l, 0, 0), (0, width, 0)),
        (((c0 - hl) / 2, 0, belt), (boot_l, 0, 0), (0, width, 0)),
        ((c1, 0, cab_c), (0, width, 0), (0, 0, cab_h)),
        ((c0, 0, cab_c), (0, width, 0), (0, 0, cab_h)),
        ((cab_x, hw, cab_c), (cab_l, 0, 0), (0, 0, cab_h)),
        ((cab_x, -hw, cab_c), (cab_l, 0, 0), (0, 0, cab_h)),
        ((cab_x, 0, hh), (cab_l, 0, 0), (0, width, 0)),
    ]
    return _faces_surface(faces, density, rng)


def _footprint(length, width, x, y, heading):
    return Box7(x, y, 0.5, length, width, 1.0, heading)


def _check_recipe(recipe: SceneRecipe):
    if recipe.n_frames < 2:
        raise SceneError("a scene needs at least 2 frames")
    if recipe.hz <= 0:
        raise SceneError("hz must be positive")
    if recipe.noise_model not in ("range", "isotropic"):
        raise SceneError(f"unknown noise model {recipe.noise_model!r}")
    if not 0 <= recipe.dropout < 1:
        raise SceneError("dropout must lie in [0, 1)")
    names = [o.name for o in recipe.objects]
    if len(set(names)) != len(names):
        raise SceneError(f"duplicate object names: {names}")
    for o in recipe.objects:
        if o.shape not in ("box", "car"):
            raise SceneError(f"object {o.name!r}: unknown shape {o.shape!r}")
        if min(o.length, o.width, o.height) <= 0:
            raise SceneError(f"object {o.name!r}: dimensions must be positive")
    for i, a in enumerate(recipe.objects):
        for b in recipe.objects[i + 1:]:
            fa = _footprint(a.length, a.width, a.x, a.y, a.heading)
            fb = _footprint(b.length, b.width, b.x, b.y, b.heading)
            if bev_iou(fa, fb) > 0:
                raise SceneError(f"objects {a.name!r} and {b.name!r} interpenetrate at t=0")


def generate_scene(recipe: SceneRecipe) -> tuple[Sequence, GroundTruth]:
    """Render a deterministic synthetic LiDAR sequence with exact ground truth.

    Object surfaces are sampled once in the body frame; every frame observes a
    random subset (range falloff, dropout, optional sweeping visibility slice)
    with fresh Gaussian noise. Ground-truth flow is the noiseless rigid
    displacement of each observed body point over the next frame interval.
    """
    _check_recipe(recipe)
    rng = np.random.default_rng(recipe.seed)
    dt = 1.0 / recipe.hz

    samplers = {"box": _box_surface, "car": _car_surface}
    bodies = [samplers[o.shape](o.length, o.width, o.height, o.density, rng) for o in recipe.objects]
    static_world = []
    for s in recipe.statics:
        pts = _box_surface(s.length, s.width, s.height, s.density, rng)
        pts = pts @ yaw_matrix(s.heading).T + np.array([s.x, s.y, s.height / 2])
        static_world.append(pts)
    static_world = np.vstack(static_world) if static_world else np.zeros((0, 3))

    # Object and ego states for frames 0..n (one extra to define the last flow).
    states = []
    for o in recipe.objects:
        traj = [(o.x, o.y, o.heading)]
        for k in range(recipe.n_frames):
            speed, yaw_rate = o.motion_at(k)
            traj.append(_advance(*traj[-1], speed, yaw_rate, dt))
        states.append(traj)
    ego = [tuple(recipe.ego_start)]
    for _ in range(recipe.n_frames):
        ego.append(_advance(*ego[-1], recipe.ego_speed, recipe.ego_yaw_rate, dt))

    def body_to_world(o, state, pts):
        x, y, h = state
        return pts @ yaw_matrix(h).T + np.array([x, y, o.clearance + o.height / 2])

    frames, truths = [], []
    for k in range(recipe.n_frames):
        ex, ey, eyaw = ego[k]
        sensor = np.array([ex, ey, recipe.sensor_height])
        pose = RigidTransform(yaw_matrix(eyaw), sensor)

        chunks, flows, tracks = [], [], []
        boxes, tids, speeds = [], [], []
        for tid, (o, body) in enumerate(zip(recipe.objects, bodies)):
            now, nxt = states[tid][k], states[tid][k + 1]
            rng_dist = max(math.hypot(now[0] - ex, now[1] - ey), 1e-3)
            keep_p = (1 - recipe.dropout) * min(1.0, (recipe.ref_range / rng_dist) ** 2)
            keep = rng.random(len(body)) < keep_p
            if o.slice_fraction is not None:
                frac = o.slice_fraction
                period = o.slice_period or recipe.n_frames
                phase = (k % period) / max(period - 1, 1)
                start = -0.5 + (1 - frac) * phase
                u = body[:, 0] / o.length
                keep &= (u >= start - 1e-12) & (u <= start + frac + 1e-12)
            sel = body[keep]
            p0 = body_to_world(o, now, sel)
            p1 = body_to_world(o, nxt, sel)
            chunks.append(p0)
            flows.append(p1 - p0)
            tracks.append(np.full(len(sel), tid, dtype=np.int64))
            boxes.append(Box7(now[0], now[1], o.clearance + o.height / 2,
                              o.length, o.width, o.height, now[2]))
            tids.append(tid)
            speeds.append(float(o.motion_at(k)[0]))

        if len(static_world):
            d = np.linalg.norm(static_world[:, :2] - [ex, ey], axis=1)
            keep_p = (1 - recipe.dropout) * np.minimum(1.0, (recipe.ref_range / np.maximum(d, 1e-3)) ** 2)
            sel = static_world[rng.random(len(static_world)) < keep_p]
            chunks.append(sel)
            flows.append(np.zeros_like(sel))
            tracks.append(np.full(len(sel), BACKGROUND, dtype=np.int64))

        if recipe.ground_points:
            r = rng.uniform(3.0, recipe.ground_radius, recipe.ground_points)
            a = rng.uniform(-math.pi, math.pi, recipe.ground_points)
            g = np.column_stack([ex + r * np.cos(a), ey + r * np.sin(a), np.zeros_like(r)])
            chunks.append(g)
            flows.append(np.zeros_like(g))
            tracks.append(np.full(len(g), GROUND, dtype=np.int64))

        world = np.vstack(chunks)
        flow = np.vstack(flows)
        track = np.concatenate(tracks)
        if recipe.noise_model == "range":
            rays = world - sensor
            rays /= np.maximum(np.linalg.norm(rays, axis=1, keepdims=True), 1e-9)
            world = world + rays * rng.normal(0.0, recipe.noise_sigma, size=(len(world), 1))
        else:
            world = world + rng.normal(0.0, recipe.noise_sigma, size=world.shape)
        order = rng.permutation(len(world))
        world, flow, track = world[order], flow[order], track[order]

        frames.append(Frame(k, k * dt, pose.inverse().apply(world), pose))
        truths.append(FrameTruth(boxes, tids, speeds, flow, track))
    return Sequence(frames, recipe.seq_id, recipe.hz), GroundTruth(truths)


def standard_scene(seed: int = 7, **overrides) -> SceneRecipe:
    """Five movers at 1, 3, 6, 10 and 15 m/s in separate lanes, 20 frames at 10 Hz."""
    objects = [
        ObjectSpec("car_fast", 4.6, 1.9, 1.6, x=-14.0, y=5.0, heading=0.0, speed=15.0),
        ObjectSpec("car", 4.4, 1.8, 1.5, x=16.0, y=-5.0, heading=math.pi, speed=10.0),
        ObjectSpec("van", 5.0, 2.0, 2.0, x=-4.0, y=10.0, heading=0.0, speed=6.0),
        ObjectSpec("cyclist", 1.8, 0.7, 1.5, x=6.0, y=-10.0, heading=0.0, speed=3.0,
                   clearance=0.2, density=20.0),
        ObjectSpec("pedestrian", 0.8, 0.7, 1.7, x=12.0, y=14.0, heading=math.pi / 2, speed=1.0,
                   clearance=0.2, density=25.0),
    ]
    statics = [
        StaticSpec(40.0, 0.3, 3.0, x=5.0, y=19.0),
        StaticSpec(40.0, 0.3, 3.0, x=5.0, y=-16.0),
        StaticSpec(0.3, 0.3, 4.0, x=0.0, y=-13.0),
        StaticSpec(0.3, 0.3, 4.0, x=15.0, y=-13.0),
        StaticSpec(2.0, 2.0, 1.0, x=22.0, y=1.0, density=10.0),
    ]
    recipe = SceneRecipe(objects=objects, statics=statics, n_frames=20, hz=10.0, seed=seed,
                         noise_sigma=0.02)
    for k, v in overrides.items():
        if not hasattr(recipe, k):
            raise SceneError(f"unknown recipe field {k!r}")
        setattr(recipe, k, v)
    return recipe
