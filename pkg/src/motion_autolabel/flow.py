"""Scene flow by per-cluster runtime optimization of coordinate networks.

Dynamic points of frame t are split into connected components. Each component
gets its own pair of freshly initialised networks (forward and backward flow)
fitted against a box-queried target in frame t+1, with a pairwise flow
consistency penalty inside the component.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist
from sklearn.cluster import DBSCAN

from .geometry import BevRect, NNIndex, as_points
from .mlp import MLP, Adam
from .preprocess import DYNAMIC, NOISE

log = logging.getLogger(__name__)


@dataclass
class FlowConfig:
    eps_p_m: float = 1.0
    min_pts: int = 3
    delta_max_m: float = 2.5
    alpha: float = 0.1
    layers: int = 4
    width: int = 64
    nonlinearity: str = "tanh"
    step: float = 8e-3
    max_iters: int = 500
    patience: int = 30
    tol: float = 1e-6
    seed: int = 0
    expand: bool = True
    prune: bool = True
    exact_pairwise_max: int = 512

    def network(self) -> MLP:
        return MLP(self.layers, self.width, self.nonlinearity)


@dataclass
class ClusterTarget:
    source: np.ndarray
    target: np.ndarray
    target_indices: np.ndarray     # into the next frame's dynamic points
    rect: BevRect
    expanded: BevRect
    n: int

    @property
    def empty(self) -> bool:
        return len(self.target) == 0


@dataclass
class ClusterResult:
    flow: np.ndarray
    loss: float
    iterations: int
    flags: list = field(default_factory=list)


@dataclass
class FlowField:
    """Per-point flow (meters per frame interval, world frame) with motion status."""

    flow: np.ndarray
    status: np.ndarray
    cluster: np.ndarray
    flags: list = field(default_factory=list)

    def __post_init__(self):
        bad = (self.status != DYNAMIC) & np.any(self.flow != 0, axis=1)
        if np.any(bad):
            raise ValueError("non-dynamic points must carry exactly zero flow")

    @classmethod
    def zeros(cls, status) -> "FlowField":
        status = np.asarray(status, dtype=np.uint8)
        return cls(np.zeros((len(status), 3)), status, np.full(len(status), -1, np.int64))

    def negated(self) -> "FlowField":
        return FlowField(-self.flow, self.status.copy(), self.cluster.copy(), list(self.flags))


def decompose_scene(dynamic, eps_p: float = 1.0, min_pts: int = 3) -> list[np.ndarray]:
    """DBSCAN on 3D positions; returns index arrays, noise points excluded."""
    if eps_p <= 0 or min_pts < 1:
        raise ValueError("eps_p must be positive and min_pts at least 1")
    pts = as_points(dynamic)
    if len(pts) == 0:
        return []
    labels = DBSCAN(eps=eps_p, min_samples=min_pts).fit_predict(pts)
    return [np.nonzero(labels == k)[0] for k in range(labels.max() + 1)]


def expansion_buffers(rect: BevRect, delta_max: float) -> tuple[float, float]:
    """Buffers with delta_y / delta_x equal to the rectangle's aspect ratio."""
    ex, ey = rect.x_max - rect.x_min, rect.y_max - rect.y_min
    if ex <= 0 and ey <= 0:
        return delta_max, delta_max
    if ex >= ey:
        return delta_max, delta_max * ey / ex
    return delta_max * ex / ey, delta_max


def box_query(cluster, next_dynamic, delta_max: float = 2.5, expand: bool = True,
              prune: bool = True) -> ClusterTarget:
    src = as_points(cluster)
    nxt = as_points(next_dynamic)
    rect = BevRect.around(src)
    expanded = rect.expand(*expansion_buffers(rect, delta_max)) if expand else rect
    omega = np.nonzero(expanded.contains(nxt))[0]
    if prune and len(omega) > len(src):
        d = np.linalg.norm(nxt[omega] - src.mean(axis=0), axis=1)
        omega = omega[np.argsort(d, kind="stable")[: len(src)]]
    return ClusterTarget(src, nxt[omega], omega, rect, expanded, len(omega))


def pairwise_consistency(flow: np.ndarray, exact_max: int = 512) -> float:
    """Sum over ordered pairs i != j of |f_i - f_j|^2."""
    n = len(flow)
    if n < 2:
        return 0.0
    if n <= exact_max:
        return float(2.0 * np.sum(pdist(flow, "sqeuclidean")))
    centered = flow - flow.mean(axis=0)
    return float(2 * n * np.sum(centered * centered))


def cluster_objective(net: MLP, theta, theta_bwd, source: np.ndarray, fwd_index: NNIndex,
                      bwd_index: NNIndex, alpha: float, exact_max: int = 512, grad: bool = True):
    """Forward and backward Chamfer terms plus the consistency penalty.

    Returns ``(loss, grads_theta, grads_theta_bwd, flow)``; gradients are None
    when ``grad`` is False.
    """
    n = len(source)
    flow, cache_f = net.forward(theta, source)
    moved = source + flow
    back, cache_b = net.forward(theta_bwd, moved)
    returned = moved + back
    if not (np.all(np.isfinite(moved)) and np.all(np.isfinite(returned))):
        return math.nan, None, None, flow
    d2f, idx_f = fwd_index.query(moved)
    d2b, idx_b = bwd_index.query(returned)
    reg = alpha / n * pairwise_consistency(flow, exact_max)
    loss = float(np.mean(d2f) + np.mean(d2b) + reg)
    if not grad:
        return loss, None, None, flow

    g_returned = 2.0 / n * (returned - bwd_index.points[idx_b])
    grads_b, g_moved_via_bwd = net.backward(theta_bwd, cache_b, g_returned, input_grad=True)
    g_moved = 2.0 / n * (moved - fwd_index.points[idx_f]) + g_returned + g_moved_via_bwd
    g_flow = g_moved + 4.0 * alpha * (flow - flow.mean(axis=0))
    grads_f, _ = net.backward(theta, cache_f, g_flow)
    return loss, grads_f, grads_b, flow


def cluster_seed(base: int, frame: int, cluster: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base & 0xFFFFFFFF, frame & 0xFFFFFFFF, cluster & 0xFFFFFFFF])


def optimize_cluster_flow(source, target: ClusterTarget | np.ndarray, cfg: FlowConfig | None = None,
                          seed=0) -> ClusterResult:
    """Fit forward/backward networks by Adam; return the forward flow at the best iterate."""
    cfg = cfg or FlowConfig()
    src = as_points(source)
    tgt = target.target if isinstance(target, ClusterTarget) else as_points(target)
    if len(tgt) == 0:
        return ClusterResult(np.zeros_like(src), math.nan, 0, ["unmatched"])
    net = cfg.network()
    fwd_index, bwd_index = NNIndex(tgt), NNIndex(src)
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    flags = []
    for attempt in range(2):
        child = np.random.SeedSequence(seq.entropy, spawn_key=tuple(seq.spawn_key) + (attempt,))
        with np.errstate(over="ignore", invalid="ignore"):
            result = _run_adam(net, src, fwd_index, bwd_index, cfg, np.random.default_rng(child))
        if result is not None:
            result.flags = flags + result.flags
            return result
        flags.append("restarted")
        log.warning("non-finite loss; re-seeding cluster optimisation (attempt %d)", attempt + 1)
    return ClusterResult(np.zeros_like(src), math.nan, 0, flags + ["diverged"])


def _run_adam(net, src, fwd_index, bwd_index, cfg: FlowConfig, rng) -> ClusterResult | None:
    flat, params = net.flat_params(2 * [rng])
    theta, theta_bwd = params[: len(params) // 2], params[len(params) // 2:]
    opt = Adam([flat], lr=cfg.step)
    best_loss, best_flow, best_it = math.inf, None, 0
    plateau_ref, since = math.inf, 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        loss, gf, gb, flow = cluster_objective(net, theta, theta_bwd, src, fwd_index, bwd_index,
                                               cfg.alpha, cfg.exact_pairwise_max)
        if not math.isfinite(loss):
            return None
        if loss < best_loss:
            best_loss, best_flow, best_it = loss, flow, it
        if loss < plateau_ref - cfg.tol:
            plateau_ref, since = loss, 0
        else:
            since += 1
            if since >= cfg.patience:
                break
        opt.step([flat], [np.concatenate([g.ravel() for g in gf + gb])])
    return ClusterResult(best_flow, best_loss, it)


def estimate_frame_flow(points_t, points_t1, mask_t, mask_t1, cfg: FlowConfig | None = None,
                        frame_index: int = 0, threads: int = 1) -> FlowField:
    """Flow for every point of frame t (world frame) toward frame t+1.

    Non-dynamic points, DBSCAN noise and unmatched clusters get exactly zero flow.
    """
    cfg = cfg or FlowConfig()
    pts_t, pts_t1 = as_points(points_t), as_points(points_t1)
    status = np.asarray(mask_t, dtype=np.uint8).copy()
    dyn_t = np.nonzero(status == DYNAMIC)[0]
    dyn_t1 = np.nonzero(np.asarray(mask_t1) == DYNAMIC)[0]
    flow = np.zeros((len(pts_t), 3))
    cluster_of = np.full(len(pts_t), -1, dtype=np.int64)

    clusters = decompose_scene(pts_t[dyn_t], cfg.eps_p_m, cfg.min_pts) if len(dyn_t) else []
    in_cluster = np.zeros(len(dyn_t), dtype=bool)
    for k, members in enumerate(clusters):
        in_cluster[members] = True
        cluster_of[dyn_t[members]] = k
    status[dyn_t[~in_cluster]] = NOISE
    next_dynamic = pts_t1[dyn_t1]

    def solve(k):
        src = pts_t[dyn_t[clusters[k]]]
        query = box_query(src, next_dynamic, cfg.delta_max_m, cfg.expand, cfg.prune)
        return optimize_cluster_flow(src, query, cfg, cluster_seed(cfg.seed, frame_index, k))

    if threads > 1 and len(clusters) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(solve, range(len(clusters))))
    else:
        results = [solve(k) for k in range(len(clusters))]

    flags = []
    for k, (members, res) in enumerate(zip(clusters, results)):
        flow[dyn_t[members]] = res.flow
        flags.append({"frame": frame_index, "cluster": k, "size": int(len(members)),
                      "iterations": res.iterations,
                      "loss": None if not math.isfinite(res.loss) else res.loss,
                      "flags": res.flags})
    return FlowField(flow, status, cluster_of, flags)


def save_flow(field_: FlowField, path) -> Path:
    """Write float32 (x, y, z) flow triples followed by one status byte per point."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(field_.flow.astype("<f4").tobytes())
        fh.write(field_.status.astype(np.uint8).tobytes())
    return out


def load_flow(path, n_points: int | None = None) -> FlowField:
    raw = Path(path).read_bytes()
    if n_points is None:
        if len(raw) % 13:
            raise ValueError(f"{path}: size {len(raw)} is not a multiple of 13 bytes")
        n_points = len(raw) // 13
    if len(raw) != 13 * n_points:
        raise ValueError(f"{path}: expected {13 * n_points} bytes, found {len(raw)}")
    flow = np.frombuffer(raw[: 12 * n_points], dtype="<f4").reshape(-1, 3).astype(float)
    status = np.frombuffer(raw[12 * n_points:], dtype=np.uint8).copy()
    return FlowField(flow, status, np.full(n_points, -1, np.int64))
