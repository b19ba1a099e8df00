"""Run configuration: JSON schema validation and object construction.

A config fully determines a run: the latent mechanism, the scene, the
training budgets, and the evaluation protocol.  Validation rejects unknown
keys and names the offending field on any semantic error.
"""

from __future__ import annotations

import json
from importlib import resources

from . import scene as sc
from . import scm as sm


class ConfigError(ValueError):
    """Invalid configuration; the message names the field."""


_DIST_KEYS = {"mu", "sigma2", "lo", "hi"}


def _require_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _dist(obj, where):
    _require_keys(obj, _DIST_KEYS, _DIST_KEYS, where)
    try:
        return sm.TruncatedNormalSpec(
            float(obj["mu"]), float(obj["sigma2"]),
            float(obj["lo"]), float(obj["hi"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _number(obj, key, where, cast=float, positive=False, minimum=None):
    if key not in obj:
        raise ConfigError(f"{where}: missing key {key!r}")
    try:
        v = cast(obj[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.{key}: {exc}") from exc
    if positive and v <= 0:
        raise ConfigError(f"{where}.{key}: must be positive")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where}.{key}: must be >= {minimum}")
    return v


_TRAIN_DEFAULTS = {
    "ae1": {"steps": 1500, "batch_size": 32, "lr": 1e-4},
    "ldr": {"steps": 4000, "batch_size": 32, "lr": 1e-3,
            "plateau_tol": 1e-5, "plateau_window": 200, "dense_width": 64},
    "ae2": {"steps": 5000, "batch_size": 32, "lr": 3e-4,
            "restarts": 3, "probe_steps": 1500,
            "anchor_steps": 1500, "anchor_weight": 1.0},
}

_PIPELINE_DEFAULTS = {
    "n_points": 1500,
    "lambda": 1.0,
    "widths": [16, 32],
    "joint_ae2": False,
    "anchor_copy": False,
}

_EVAL_DEFAULTS = {
    "calibration_samples": 1000,
    "test_samples": 500,
    "repeats": 15,
    "occlusion_sizes": [8],
    "occlusion_value": 1.0,
}


class RunConfig:
    """Validated run description with builders for the domain objects."""

    def __init__(self, raw):
        self.raw = self._validate(raw)

    # ------------------------------------------------------------------
    @staticmethod
    def _validate(raw):
        _require_keys(raw, {"seed", "out_dir", "scm", "scene", "pipeline",
                            "eval"},
                      {"scm", "scene"}, "config")
        out = {"seed": int(raw.get("seed", 0)),
               "out_dir": raw.get("out_dir")}
        if out["out_dir"] is not None and not isinstance(out["out_dir"], str):
            raise ConfigError("config.out_dir: expected a string")

        out["scm"] = RunConfig._validate_scm(raw["scm"])
        d = len(out["scm"]["joints"])
        out["scene"] = RunConfig._validate_scene(raw["scene"], d)
        out["pipeline"] = RunConfig._validate_pipeline(raw.get("pipeline", {}))
        out["eval"] = RunConfig._validate_eval(raw.get("eval", {}),
                                               out["scene"]["image_size"])
        min_pool = (out["eval"]["calibration_samples"]
                    + out["eval"]["test_samples"])
        if out["pipeline"]["n_points"] < min_pool:
            raise ConfigError(
                f"pipeline.n_points: need >= {min_pool} samples for the "
                "calibration/test split"
            )
        return out

    @staticmethod
    def _validate_scm(raw):
        _require_keys(raw, {"mode", "joints", "edges", "noise"},
                      {"joints"}, "scm")
        mode = raw.get("mode", "independent")
        if mode not in ("independent", "linear-sem"):
            raise ConfigError(f"scm.mode: unknown mode {mode!r}")
        joints = raw["joints"]
        if not isinstance(joints, list) or not joints:
            raise ConfigError("scm.joints: expected a non-empty list")
        out_joints = []
        for i, j in enumerate(joints):
            where = f"scm.joints[{i}]"
            _require_keys(j, {"observational", "interventions", "range"},
                          set(), where)
            obs = j.get("observational")
            obs = _dist(obs, f"{where}.observational") if obs is not None else None
            rng = j.get("range")
            if rng is not None:
                if (not isinstance(rng, list) or len(rng) != 2
                        or rng[0] >= rng[1]):
                    raise ConfigError(f"{where}.range: expected [lo, hi]")
                rng = (float(rng[0]), float(rng[1]))
            elif obs is not None:
                rng = (obs.lo, obs.hi)
            else:
                raise ConfigError(
                    f"{where}: a joint without an observational mechanism "
                    "needs an explicit range"
                )
            ints = j.get("interventions")
            if ints is not None:
                if not isinstance(ints, list) or len(ints) != 2:
                    raise ConfigError(
                        f"{where}.interventions: expected exactly 2 mechanisms"
                    )
                ints = tuple(_dist(v, f"{where}.interventions[{k}]")
                             for k, v in enumerate(ints))
            out_joints.append({"observational": obs, "range": rng,
                               "interventions": ints})
        edges = raw.get("edges", [])
        if mode == "independent" and edges:
            raise ConfigError("scm.edges: not allowed in independent mode")
        out_edges = []
        for k, e in enumerate(edges):
            if not isinstance(e, list) or len(e) != 3:
                raise ConfigError(
                    f"scm.edges[{k}]: expected [parent, child, weight]")
            out_edges.append((int(e[0]), int(e[1]), float(e[2])))
        noise = raw.get("noise")
        if mode == "linear-sem":
            if noise is None:
                raise ConfigError("scm.noise: required in linear-sem mode")
            noise = _dist(noise, "scm.noise")
        elif noise is not None:
            raise ConfigError("scm.noise: not allowed in independent mode")
        for i, j in enumerate(out_joints):
            is_root = not any(c == i for _, c, _ in out_edges)
            if is_root and j["observational"] is None:
                raise ConfigError(
                    f"scm.joints[{i}]: root joint needs an observational "
                    "mechanism"
                )
        return {"mode": mode, "joints": out_joints, "edges": out_edges,
                "noise": noise}

    @staticmethod
    def _validate_scene(raw, num_joints):
        _require_keys(raw, {"link_lengths", "axis_pattern", "link_radius",
                            "image_size", "views"},
                      {"link_lengths", "views"}, "scene")
        lengths = raw["link_lengths"]
        if not isinstance(lengths, list) or len(lengths) != num_joints:
            raise ConfigError(
                f"scene.link_lengths: expected {num_joints} entries to match "
                "scm.joints"
            )
        pattern = raw.get("axis_pattern", "in-plane")
        if pattern not in ("in-plane", "alternating"):
            raise ConfigError(f"scene.axis_pattern: unknown pattern {pattern!r}")
        size = raw.get("image_size", [32, 32])
        if not isinstance(size, list) or len(size) != 2:
            raise ConfigError("scene.image_size: expected [height, width]")
        views = raw["views"]
        if not isinstance(views, list) or not views:
            raise ConfigError("scene.views: expected a non-empty list")
        out_views = []
        for k, v in enumerate(views):
            where = f"scene.views[{k}]"
            _require_keys(v, {"yaw", "pitch", "scale", "center"}, set(), where)
            center = v.get("center", [size[1] / 2 - 0.5, size[0] / 2 - 0.5])
            if not isinstance(center, list) or len(center) != 2:
                raise ConfigError(f"{where}.center: expected [col, row]")
            out_views.append({
                "yaw": float(v.get("yaw", 0.0)),
                "pitch": float(v.get("pitch", 0.0)),
                "scale": float(v.get("scale", 6.0)),
                "center": (float(center[0]), float(center[1])),
            })
        return {
            "link_lengths": [float(v) for v in lengths],
            "axis_pattern": pattern,
            "link_radius": float(raw.get("link_radius", 0.15)),
            "image_size": (int(size[0]), int(size[1])),
            "views": out_views,
        }

    @staticmethod
    def _validate_pipeline(raw):
        allowed = set(_PIPELINE_DEFAULTS) | set(_TRAIN_DEFAULTS)
        _require_keys(raw, allowed, set(), "pipeline")
        out = dict(_PIPELINE_DEFAULTS)
        out["widths"] = list(out["widths"])
        for key in ("n_points",):
            if key in raw:
                out[key] = _number(raw, key, "pipeline", cast=int, positive=True)
        if "lambda" in raw:
            out["lambda"] = _number(raw, "lambda", "pipeline", minimum=0.0)
        if "widths" in raw:
            w = raw["widths"]
            if not isinstance(w, list) or len(w) != 2:
                raise ConfigError("pipeline.widths: expected two channel widths")
            out["widths"] = [int(v) for v in w]
        for key in ("joint_ae2", "anchor_copy"):
            if key in raw:
                if not isinstance(raw[key], bool):
                    raise ConfigError(f"pipeline.{key}: expected a boolean")
                out[key] = raw[key]
        for stage, defaults in _TRAIN_DEFAULTS.items():
            sub = raw.get(stage, {})
            _require_keys(sub, set(defaults), set(), f"pipeline.{stage}")
            merged = dict(defaults)
            for k in sub:
                cast = int if isinstance(defaults[k], int) else float
                merged[k] = _number(sub, k, f"pipeline.{stage}", cast=cast,
                                    positive=True)
            out[stage] = merged
        return out

    @staticmethod
    def _validate_eval(raw, image_size):
        _require_keys(raw, set(_EVAL_DEFAULTS), set(), "eval")
        out = dict(_EVAL_DEFAULTS)
        out["occlusion_sizes"] = list(out["occlusion_sizes"])
        for key in ("calibration_samples", "test_samples", "repeats"):
            if key in raw:
                out[key] = _number(raw, key, "eval", cast=int, positive=True)
        if "occlusion_value" in raw:
            out["occlusion_value"] = _number(raw, "occlusion_value", "eval",
                                             minimum=0.0)
        if "occlusion_sizes" in raw:
            sizes = raw["occlusion_sizes"]
            if not isinstance(sizes, list):
                raise ConfigError("eval.occlusion_sizes: expected a list")
            out["occlusion_sizes"] = [int(s) for s in sizes]
        for s in out["occlusion_sizes"]:
            if s < 0 or s > min(image_size):
                raise ConfigError(
                    f"eval.occlusion_sizes: size {s} does not fit the "
                    f"{image_size[0]}x{image_size[1]} image"
                )
        return out

    # ------------------------------------------------------------------
    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def num_joints(self):
        return len(self.raw["scm"]["joints"])

    @property
    def intervened_joints(self):
        return [i for i, j in enumerate(self.raw["scm"]["joints"])
                if j["interventions"] is not None]

    def build_scm(self):
        s = self.raw["scm"]
        joints = s["joints"]
        root_dists = {i: j["observational"] for i, j in enumerate(joints)
                      if j["observational"] is not None}
        ranges = tuple(j["range"] for j in joints)
        if s["mode"] == "independent":
            return sm.LatentScm(sm.DagSpec(len(joints)), root_dists)
        noise = {i: s["noise"] for i in range(len(joints))}
        return sm.LatentScm(sm.DagSpec(len(joints), s["edges"]), root_dists,
                            noise, "linear-sem", ranges)

    def build_pairs(self):
        pairs = []
        for i, j in enumerate(self.raw["scm"]["joints"]):
            if j["interventions"] is not None:
                q, q_bar = j["interventions"]
                pairs.append(sm.InterventionPair(i, q, q_bar))
        return pairs

    def build_scene(self):
        s = self.raw["scene"]
        views = tuple(
            sc.ViewSpec(yaw=v["yaw"], pitch=v["pitch"], scale=v["scale"],
                        center=v["center"])
            for v in s["views"]
        )
        return sc.ArmScene(
            link_lengths=tuple(s["link_lengths"]),
            rotation_axes=sc.default_axes(len(s["link_lengths"]),
                                          s["axis_pattern"]),
            views=views,
            link_radius=s["link_radius"],
            image_size=s["image_size"],
        )

    def canonical(self):
        """JSON-serializable normalized form, used for hashing."""

        def enc(v):
            if isinstance(v, sm.TruncatedNormalSpec):
                return {"mu": v.mu, "sigma2": v.sigma2, "lo": v.lo, "hi": v.hi}
            if isinstance(v, tuple):
                return [enc(x) for x in v]
            if isinstance(v, list):
                return [enc(x) for x in v]
            if isinstance(v, dict):
                return {k: enc(x) for k, x in v.items()}
            return v

        out = enc(self.raw)
        out.pop("out_dir")
        return out


def parse_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}"
        ) from exc
    return RunConfig(raw)


def load_preset(name) -> RunConfig:
    """Load a shipped preset by bare name, e.g. ``single_view_3joint``."""
    ref = resources.files("ropes").joinpath("presets", f"{name}.json")
    if not ref.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return RunConfig(json.loads(ref.read_text(encoding="utf-8")))


def preset_names():
    root = resources.files("ropes").joinpath("presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))
