"""Pipeline configuration: one TOML file with strict keys.

Layout::

    seed = 7
    output_dir = "runs/basic"

    [data]            # scene recipe for ``gen``; omitted -> the standard five-mover scene
    [data.scene] ...  # SceneRecipe fields, [[data.scene.objects]], [[data.scene.statics]]

    [preprocess]      ransac_iters, tau_g_m, max_tilt_deg, min_inlier_frac,
                      static_v_thresh_mps, static_window
    [flow]            eps_p_m, min_pts, delta_max_m, alpha, expand, prune
    [flow.net]        layers, width, nonlinearity
    [flow.opt]        step, max_iters, patience, tol, seed (defaults to the global seed)
    [autolabel]       eps_p_m, eps_f, f_min_mps, min_pts, match_iou, max_misses,
                      min_track_len, ema, min_track_speed_mps
    [autolabel.icp]   max_iters, tol, grid, cap_factor, cap_decay, coarse_start_m
    [metrics]         iou_thresh, iou, min_speed_mps, speed_edges

Unknown keys anywhere are an error, as are non-positive thresholds.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .autolabel import AutolabelConfig
from .data import SceneRecipe, standard_scene
from .flow import FlowConfig
from .preprocess import RansacConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 7,
    "output_dir": "runs/out",
    "data": {"scene": None},
    "preprocess": {
        "ransac_iters": 200, "tau_g_m": 0.15, "max_tilt_deg": 15.0, "min_inlier_frac": 0.15,
        "static_v_thresh_mps": 0.2, "static_window": 1,
    },
    "flow": {
        "eps_p_m": 1.0, "min_pts": 3, "delta_max_m": 2.5, "alpha": 0.1, "expand": True, "prune": True,
        "net": {"layers": 4, "width": 64, "nonlinearity": "tanh"},
        "opt": {"step": 8e-3, "max_iters": 500, "patience": 30, "tol": 1e-6, "seed": None},
    },
    "autolabel": {
        "eps_p_m": 1.0, "eps_f": 0.1, "f_min_mps": 1.0, "min_pts": 5, "match_iou": 0.1,
        "max_misses": 2, "min_track_len": 3, "ema": 0.5, "min_track_speed_mps": 0.5,
        "icp": {"max_iters": 50, "tol": 1e-6, "grid": 5, "cap_factor": 2.0, "cap_decay": 0.7,
                "coarse_start_m": 1.0},
    },
    "metrics": {"iou_thresh": 0.4, "iou": "3d", "min_speed_mps": 1.0,
                "speed_edges": [0.0, 3.0, 6.0, 9.0, 12.0, 15.0]},
}

# keys whose values must be strictly positive
POSITIVE = {
    "preprocess": ("ransac_iters", "tau_g_m", "max_tilt_deg", "min_inlier_frac", "static_v_thresh_mps",
                   "static_window"),
    "flow": ("eps_p_m", "min_pts", "delta_max_m", "alpha"),
    "flow.net": ("layers", "width"),
    "flow.opt": ("step", "max_iters", "patience", "tol"),
    "autolabel": ("eps_p_m", "eps_f", "f_min_mps", "min_pts", "match_iou", "min_track_len", "ema"),
    "autolabel.icp": ("max_iters", "tol", "cap_factor", "cap_decay", "coarse_start_m"),
    "metrics": ("iou_thresh",),
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a table")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = value
    return out


def _get(tree: dict, dotted: str) -> dict:
    for part in dotted.split("."):
        tree = tree[part]
    return tree


def _validate(tree: dict):
    for block, keys in POSITIVE.items():
        sub = _get(tree, block)
        for k in keys:
            v = sub[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"{block}.{k} must be a positive number, got {v!r}")
    if tree["preprocess"]["static_window"] > 3:
        raise ConfigError("preprocess.static_window must be between 1 and 3")
    if tree["autolabel"]["match_iou"] > 1 or tree["metrics"]["iou_thresh"] > 1:
        raise ConfigError("IoU thresholds must lie in (0, 1]")
    if _grid_size(tree["autolabel"]["icp"]["grid"]) < 1:
        raise ConfigError("autolabel.icp.grid must be at least 1")
    if tree["autolabel"]["icp"]["cap_decay"] >= 1:
        raise ConfigError("autolabel.icp.cap_decay must lie in (0, 1)")
    if tree["preprocess"]["min_inlier_frac"] > 1:
        raise ConfigError("preprocess.min_inlier_frac must lie in (0, 1]")
    v = tree["autolabel"]["min_track_speed_mps"]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
        raise ConfigError("autolabel.min_track_speed_mps must be a non-negative number")
    if tree["autolabel"]["ema"] > 1:
        raise ConfigError("autolabel.ema must lie in (0, 1]")
    if tree["metrics"]["iou"] not in ("3d", "bev"):
        raise ConfigError("metrics.iou must be '3d' or 'bev'")
    edges = tree["metrics"]["speed_edges"]
    if not edges or edges[0] != 0 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError("metrics.speed_edges must start at 0 and increase strictly")
    if tree["flow"]["net"]["nonlinearity"] not in ("tanh", "relu", "softplus"):
        raise ConfigError("flow.net.nonlinearity must be tanh, relu or softplus")
    for name, v in (("seed", tree["seed"]), ("flow.opt.seed", tree["flow"]["opt"]["seed"])):
        if v is None and name != "seed":
            continue
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"{name} must be a non-negative integer")


@dataclass
class PipelineConfig:
    tree: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        tree = _merge(DEFAULTS, data, "")
        _validate(tree)
        cfg = cls(tree)
        cfg.recipe()                 # fail early on a bad scene table
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        try:
            data = tomllib.loads(p.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        try:
            return cls.from_dict(data)
        except ConfigError as exc:
            raise ConfigError(f"{p}: {exc}") from exc

    def with_seed(self, seed: int | None) -> "PipelineConfig":
        if seed is None:
            return self
        tree = copy.deepcopy(self.tree)
        tree["seed"] = int(seed)
        _validate(tree)
        return PipelineConfig(tree)

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.tree["output_dir"])

    def digest(self) -> str:
        blob = json.dumps(self.tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- per-module views --------------------------------------------------

    def recipe(self) -> SceneRecipe:
        scene = self.tree["data"]["scene"]
        if scene is None:
            return standard_scene(seed=self.seed)
        data = dict(scene)
        if "seed" in data:
            raise ConfigError("data.scene: set the seed at top level, not inside the scene")
        data["seed"] = self.seed
        try:
            return SceneRecipe.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.scene: {exc}") from exc

    def ransac(self) -> RansacConfig:
        p = self.tree["preprocess"]
        return RansacConfig(p["ransac_iters"], p["tau_g_m"], p["max_tilt_deg"], p["min_inlier_frac"], self.seed)

    @property
    def static_v_thresh(self) -> float:
        return float(self.tree["preprocess"]["static_v_thresh_mps"])

    @property
    def static_window(self) -> int:
        return int(self.tree["preprocess"]["static_window"])

    @property
    def flow_seed(self) -> int:
        s = self.tree["flow"]["opt"]["seed"]
        return self.seed if s is None else int(s)

    def flow(self) -> FlowConfig:
        f = self.tree["flow"]
        return FlowConfig(eps_p_m=f["eps_p_m"], min_pts=f["min_pts"], delta_max_m=f["delta_max_m"],
                          alpha=f["alpha"], layers=f["net"]["layers"], width=f["net"]["width"],
                          nonlinearity=f["net"]["nonlinearity"], step=f["opt"]["step"],
                          max_iters=f["opt"]["max_iters"], patience=f["opt"]["patience"],
                          tol=f["opt"]["tol"], seed=self.flow_seed, expand=f["expand"], prune=f["prune"])

    def autolabel(self) -> AutolabelConfig:
        a = self.tree["autolabel"]
        icp = a["icp"]
        return AutolabelConfig(eps_p_m=a["eps_p_m"], eps_f=a["eps_f"], f_min_mps=a["f_min_mps"],
                               min_pts=a["min_pts"], match_iou=a["match_iou"], max_misses=a["max_misses"],
                               min_track_len=a["min_track_len"], icp_max_iters=icp["max_iters"],
                               icp_tol=icp["tol"], icp_grid=_grid_size(icp["grid"]),
                               cap_factor=icp["cap_factor"], cap_starts_m=(None, icp["coarse_start_m"]),
                               cap_decay=icp["cap_decay"], ema=a["ema"],
                               min_track_speed_mps=a["min_track_speed_mps"])

    @property
    def metrics(self) -> dict:
        return dict(self.tree["metrics"])


def _grid_size(value) -> int:
    if isinstance(value, bool):
        raise ConfigError("autolabel.icp.grid must be n or 'nxn'")
    if isinstance(value, str):
        a, _, b = value.partition("x")
        if not (a.isdigit() and a == b):
            raise ConfigError(f"autolabel.icp.grid must be n or 'nxn', got {value!r}")
        return int(a)
    if not isinstance(value, int):
        raise ConfigError(f"autolabel.icp.grid must be n or 'nxn', got {value!r}")
    return value
