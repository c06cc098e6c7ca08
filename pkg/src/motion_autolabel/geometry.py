"""Geometric primitives shared by every stage of the pipeline.

Point sets are plain ``(N, 3)`` float64 arrays (x, y, z in meters, z up).
Index order is meaningful: operations that do not filter keep it stable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Map angles to [-pi, pi). Works on scalars and arrays."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not np.all(np.isfinite(trans)):
            raise ValueError("translation must be finite")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(yaw_matrix(yaw), translation)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def is_upright(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            abs(r[0, 2]) < tol and abs(r[1, 2]) < tol
            and abs(r[2, 0]) < tol and abs(r[2, 1]) < tol
            and abs(r[2, 2] - 1.0) < tol
        )

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self after other, i.e. x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self):
        return f"RigidTransform(yaw={self.yaw:.6f}, translation={self.translation.tolist()})"


@dataclass(frozen=True)
class Box7:
    """Upright 3D box: center, dimensions (length along heading) and heading about z."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    heading: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.length, self.width, self.height, self.heading)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters: {vals}")
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError(f"box dimensions must be positive: {vals[3:6]}")
        for name in ("cx", "cy", "cz", "length", "width", "height"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @classmethod
    def from_array(cls, arr) -> "Box7":
        return cls(*[float(v) for v in arr])

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.length, self.width, self.height, self.heading])

    def to_list(self) -> list:
        return self.to_array().tolist()

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def z_min(self) -> float:
        return self.cz - 0.5 * self.height

    @property
    def z_max(self) -> float:
        return self.cz + 0.5 * self.height

    def replace(self, **kw) -> "Box7":
        vals = dict(cx=self.cx, cy=self.cy, cz=self.cz, length=self.length,
                    width=self.width, height=self.height, heading=self.heading)
        vals.update(kw)
        return Box7(**vals)

    def corners_bev(self) -> np.ndarray:
        """Counter-clockwise BEV corners, shape (4, 2)."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def to_local(self, points) -> np.ndarray:
        pts = as_points(points)
        c, s = math.cos(self.heading), math.sin(self.heading)
        d = pts - self.center
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)

    def contains(self, points, slack: float = 1e-9) -> np.ndarray:
        """Boolean mask of points inside the box (inclusive, with slack)."""
        local = self.to_local(points)
        half = np.array([self.length, self.width, self.height]) * 0.5 + slack
        return np.all(np.abs(local) <= half, axis=1)


@dataclass(frozen=True)
class BevRect:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted rectangle {self}")

    @classmethod
    def around(cls, points) -> "BevRect":
        pts = as_points(points)
        if len(pts) == 0:
            raise ValueError("cannot bound an empty point set")
        lo, hi = pts[:, :2].min(axis=0), pts[:, :2].max(axis=0)
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def expand(self, dx: float, dy: float) -> "BevRect":
        return BevRect(self.x_min - dx, self.y_min - dy, self.x_max + dx, self.y_max + dy)

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if len(pts) == 0:
            return np.zeros(0, dtype=bool)
        x, y = pts[:, 0], pts[:, 1]
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Fixed summation order so results are reproducible against a brute-force loop.
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class NNIndex:
    """Read-only nearest-neighbour index over a point set.

    Candidates come from a k-d tree; the winner is re-selected with exact
    squared distances, ties going to the lowest target index.
    """

    _K = 3

    def __init__(self, points):
        self.points = as_points(points).copy()
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return (squared distance, index) of each query's nearest point."""
        q = as_points(queries)
        if self._tree is None:
            raise ValueError("nearest-neighbour query against an empty point set")
        n = len(self.points)
        if len(q) == 0:
            return np.zeros(0), np.zeros(0, dtype=np.int64)
        k = min(self._K, n)
        _, cand = self._tree.query(q, k=k)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), k)
        # The tree reports index n when distances overflow; such rows go exhaustive.
        missing = np.any(cand >= n, axis=1)
        np.minimum(cand, n - 1, out=cand)
        cand.sort(axis=1)
        d2 = _sq_dists(self.points[cand], q[:, None, :])
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(q))
        idx = cand[rows, best]
        dmin = d2[rows, best]
        if k < n:
            # When the k-th candidate is (nearly) as close as the winner, a lower-index
            # tie may lie outside the candidate list: resolve those rows exhaustively.
            kth = d2.max(axis=1)
            missing |= kth <= dmin * (1 + 1e-9) + 1e-300
        for r in np.nonzero(missing)[0]:
            full = _sq_dists(self.points, q[r])
            j = int(np.argmin(full))
            idx[r], dmin[r] = j, full[j]
        return dmin, idx

    def query_radius_count(self, queries, radius: float) -> np.ndarray:
        q = as_points(queries)
        if self._tree is None or len(q) == 0:
            return np.zeros(len(q), dtype=np.int64)
        return np.asarray(self._tree.query_ball_point(q, radius, return_length=True))


def chamfer(query, target_index: NNIndex) -> float:
    """One-directional Chamfer term: mean squared distance to the nearest target point."""
    if len(target_index) == 0:
        raise ValueError("chamfer target is empty")
    q = as_points(query)
    if len(q) == 0:
        return 0.0
    d2, _ = target_index.query(q)
    return float(np.mean(d2))


def principal_heading(points) -> float:
    """Heading of the BEV principal axis; used when no motion direction is available."""
    xy = as_points(points)[:, :2]
    if len(xy) < 2:
        return 0.0
    cov = np.cov((xy - xy.mean(axis=0)).T)
    vals, vecs = np.linalg.eigh(cov)
    major = vecs[:, int(np.argmax(vals))]
    return math.atan2(major[1], major[0])


MIN_DIM = 1e-3


def min_area_box_along_direction(cluster, direction, min_dim: float = MIN_DIM) -> Box7:
    """Tight upright box whose heading is the angle of ``direction`` in the xy-plane.

    Raises ValueError("no heading") when the direction is degenerate.
    """
    pts = as_points(cluster)
    if len(pts) == 0:
        raise ValueError("cannot fit a box to an empty cluster")
    d = np.asarray(direction, dtype=float).reshape(-1)[:2]
    if not np.all(np.isfinite(d)) or np.linalg.norm(d) <= 1e-6:
        raise ValueError("no heading: degenerate direction")
    heading = math.atan2(d[1], d[0])
    return box_with_heading(pts, heading, min_dim)


def box_with_heading(points, heading: float, min_dim: float = MIN_DIM) -> Box7:
    pts = as_points(points)
    c, s = math.cos(heading), math.sin(heading)
    u = c * pts[:, 0] + s * pts[:, 1]
    v = -s * pts[:, 0] + c * pts[:, 1]
    z = pts[:, 2]
    u0, u1 = u.min(), u.max()
    v0, v1 = v.min(), v.max()
    z0, z1 = z.min(), z.max()
    uc, vc = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
    # Flat or collinear clusters still need strictly positive dimensions.
    return Box7(
        c * uc - s * vc,
        s * uc + c * vc,
        0.5 * (z0 + z1),
        max(u1 - u0, min_dim),
        max(v1 - v0, min_dim),
        max(z1 - z0, min_dim),
        heading,
    )


def fit_box(cluster, direction=None) -> Box7:
    """Fit along ``direction``; fall back to the BEV principal axis if it is degenerate."""
    if direction is not None:
        try:
            return min_area_box_along_direction(cluster, direction)
        except ValueError as err:
            if "no heading" not in str(err):
                raise
    pts = as_points(cluster)
    box = box_with_heading(pts, principal_heading(pts))
    if box.width > box.length:
        box = box.replace(length=box.width, width=box.length, heading=box.heading + 0.5 * math.pi)
    return box


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=float).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box7, b: Box7) -> float:
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    return polygon_area(clip_polygon(a.corners_bev(), b.corners_bev()))


def _symmetric(fn, a, b):
    # Clipping a by b and b by a can differ in the last ulp; order the pair canonically.
    return fn(a, b) if tuple(a.to_array()) <= tuple(b.to_array()) else fn(b, a)


def bev_iou(a: Box7, b: Box7) -> float:
    def _iou(p, q):
        inter = bev_intersection_area(p, q)
        union = p.length * p.width + q.length * q.width - inter
        return min(max(inter / union, 0.0), 1.0) if union > 0 else 0.0

    return _symmetric(_iou, a, b)


def iou3d(a: Box7, b: Box7) -> float:
    def _iou(p, q):
        dz = min(p.z_max, q.z_max) - max(p.z_min, q.z_min)
        if dz <= 0:
            return 0.0
        inter = bev_intersection_area(p, q) * dz
        union = p.volume + q.volume - inter
        return min(max(inter / union, 0.0), 1.0) if union > 0 else 0.0

    return _symmetric(_iou, a, b)


def transform_points(points, t: RigidTransform) -> np.ndarray:
    return t.apply(points)


def transform_box(box: Box7, t: RigidTransform) -> Box7:
    if not t.is_upright():
        raise ValueError("non-upright transform: rotation must be about the z-axis only")
    center = t.rotation @ box.center + t.translation
    return Box7(center[0], center[1], center[2], box.length, box.width, box.height,
                box.heading + t.yaw)
