"""Ground removal and static-point identification.

Motion masks are ``uint8`` arrays aligned with a frame's points, holding one
of ``GROUND``, ``STATIC`` or ``DYNAMIC``. The flow stage adds ``NOISE`` for
dynamic points that fall in no cluster.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geometry import NNIndex, as_points

log = logging.getLogger(__name__)

GROUND = 0
STATIC = 1
DYNAMIC = 2
NOISE = 3
LABEL_NAMES = {GROUND: "ground", STATIC: "static", DYNAMIC: "dynamic", NOISE: "noise"}


class NoGroundFound(RuntimeError):
    pass


@dataclass
class RansacConfig:
    ransac_iters: int = 200
    tau_g_m: float = 0.15
    max_tilt_deg: float = 15.0
    min_inlier_frac: float = 0.15
    seed: int = 0


@dataclass(frozen=True)
class GroundModel:
    normal: tuple
    offset: float
    tau_g: float

    def distance(self, points) -> np.ndarray:
        return np.abs(as_points(points) @ np.asarray(self.normal) + self.offset)

    @property
    def tilt_deg(self) -> float:
        return math.degrees(math.acos(min(1.0, abs(self.normal[2]))))


def _plane_from(points: np.ndarray):
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid)
    normal = vt[-1]
    if normal[2] < 0:
        normal = -normal
    return normal, -float(normal @ centroid)


def remove_ground(points, cfg: RansacConfig | None = None) -> tuple[GroundModel, np.ndarray]:
    """Fit a close-to-horizontal plane by RANSAC.

    Returns the plane and a boolean mask of ground points. Raises
    ``NoGroundFound`` when no admissible plane gathers enough inliers.
    """
    cfg = cfg or RansacConfig()
    pts = as_points(points)
    if len(pts) < 3:
        raise ValueError("ground fitting needs at least 3 points")
    rng = np.random.default_rng(cfg.seed)
    cos_tilt = math.cos(math.radians(cfg.max_tilt_deg))
    best_count, best = -1, None
    for _ in range(cfg.ransac_iters):
        a, b, c = pts[rng.choice(len(pts), 3, replace=False)]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        if n[2] < 0:
            n = -n
        if n[2] < cos_tilt:
            continue
        d = -float(n @ a)
        count = int(np.count_nonzero(np.abs(pts @ n + d) < cfg.tau_g_m))
        if count > best_count:
            best_count, best = count, (n, d)
    if best is None or best_count < cfg.min_inlier_frac * len(pts):
        raise NoGroundFound("no ground found")

    n, d = best
    inliers = np.abs(pts @ n + d) < cfg.tau_g_m
    # Least-squares refinement on the consensus set, kept only if still admissible.
    rn, rd = _plane_from(pts[inliers])
    if rn[2] >= cos_tilt:
        refined = np.abs(pts @ rn + rd) < cfg.tau_g_m
        if np.count_nonzero(refined) >= np.count_nonzero(inliers):
            n, d, inliers = rn, rd, refined
    return GroundModel(tuple(float(v) for v in n), float(d), cfg.tau_g_m), inliers


def mark_static(curr, prev_world: list, dt: float, v_thresh: float = 0.2) -> np.ndarray:
    """Per-point static test against the union of earlier frames (all world frame).

    A point is static when its nearest earlier-frame neighbour lies closer than
    ``v_thresh * dt``. With no earlier frames nothing is marked static.
    """
    pts = as_points(curr)
    prev = [as_points(p) for p in prev_world if len(p)]
    if not prev or len(pts) == 0:
        return np.zeros(len(pts), dtype=bool)
    index = NNIndex(np.vstack(prev))
    d2, _ = index.query(pts)
    thresh = v_thresh * dt
    return d2 < thresh * thresh


def build_mask(points_world, prev_world: list, dt: float, ransac: RansacConfig | None = None,
               v_thresh: float = 0.2) -> tuple[np.ndarray, GroundModel | None]:
    """Full motion mask for one frame: ground, then static, everything else dynamic."""
    pts = as_points(points_world)
    mask = np.full(len(pts), DYNAMIC, dtype=np.uint8)
    model = None
    if len(pts) >= 3:
        try:
            model, ground = remove_ground(pts, ransac)
            mask[ground] = GROUND
        except NoGroundFound:
            log.info("no ground found; continuing without ground removal")
    rest = mask != GROUND
    static = mark_static(pts[rest], prev_world, dt, v_thresh)
    sub = mask[rest]
    sub[static] = STATIC
    mask[rest] = sub
    return mask, model
