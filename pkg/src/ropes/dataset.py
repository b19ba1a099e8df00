"""Dataset generation and blob I/O.

A dataset directory holds ``manifest.json`` plus raw little-endian float32
blobs, one per named array.  Ground-truth joint angles live in ``labels.f32``
and are flagged ``eval_only`` so the training pipeline can run label-blind:
training stages receive a reader view with eval-only arrays stripped, and
every blob access is recorded in an audit log.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading

import numpy as np

from . import scene as sc
from . import scm as sm
from .rng import stream

MANIFEST_NAME = "manifest.json"


def spec_hash(obj) -> str:
    """Stable hash of a JSON-serializable spec description."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_blob(path, array):
    data = np.asarray(array, dtype="<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return len(data)


def read_blob(path, shape):
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise IOError(f"{path}: expected {expected} floats, found {arr.size}")
    return arr.reshape(shape).astype(np.float64)


def write_manifest(path, manifest):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


class AccessAudit:
    """Thread-safe record of which blobs were read during which stage."""

    def __init__(self):
        self._lock = threading.Lock()
        self.events = []

    def record(self, filename, stage):
        with self._lock:
            self.events.append({"file": filename, "stage": stage})

    def stages_for(self, filename):
        with self._lock:
            return sorted({e["stage"] for e in self.events if e["file"] == filename})

    def dump(self, path):
        with self._lock:
            events = list(self.events)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(events, f, indent=2)
            f.write("\n")


class DatasetReader:
    """Reads named arrays from a dataset directory, logging every access."""

    def __init__(self, directory, audit: AccessAudit = None, stage="unknown",
                 _hide_eval_only=False):
        self.directory = directory
        self.audit = audit if audit is not None else AccessAudit()
        self.stage = stage
        self._hide_eval_only = _hide_eval_only
        with open(os.path.join(directory, MANIFEST_NAME), encoding="utf-8") as f:
            self.manifest = json.load(f)

    @property
    def arrays(self):
        items = self.manifest["arrays"]
        if self._hide_eval_only:
            return {k: v for k, v in items.items() if not v.get("eval_only")}
        return items

    def training_view(self, stage):
        """Label-blind view: eval-only arrays are not even resolvable."""
        view = DatasetReader.__new__(DatasetReader)
        view.directory = self.directory
        view.audit = self.audit
        view.stage = stage
        view._hide_eval_only = True
        view.manifest = self.manifest
        return view

    def with_stage(self, stage):
        view = DatasetReader.__new__(DatasetReader)
        view.directory = self.directory
        view.audit = self.audit
        view.stage = stage
        view._hide_eval_only = self._hide_eval_only
        view.manifest = self.manifest
        return view

    def load(self, name):
        entry = self.arrays.get(name)
        if entry is None:
            raise KeyError(f"array {name!r} not available in this view")
        self.audit.record(entry["file"], self.stage)
        return read_blob(os.path.join(self.directory, entry["file"]), entry["shape"])


def _render_views(scene, z):
    return np.stack([sc.render_pose(scene, z, v) for v in scene.views])


def generate_dataset(scm: sm.LatentScm, pairs, scene: sc.ArmScene, n: int,
                     seed: int, out_dir: str, regime: str = "single-view",
                     anchor_copy: bool = False,
                     scm_desc=None, scene_desc=None) -> dict:
    """Render ``n`` data points (one observational pose plus two interventional
    poses per pair, all views) and write blobs + manifest.

    Returns the manifest.  Non-target coordinates of interventional poses are
    re-sampled from the observational law unless ``anchor_copy`` is set, in
    which case they are copied from the anchor pose.
    """
    if not pairs:
        raise ValueError("need at least one intervention pair")
    for pair in pairs:
        if not sm.check_discrepancy(pair):
            raise ValueError(
                f"pair for joint {pair.target} has identical mechanisms"
            )
    os.makedirs(out_dir, exist_ok=True)
    h, w = scene.image_size
    nviews = len(scene.views)

    rng_obs = stream(seed, "dataset", "obs")
    z_obs = sm.sample_observational(scm, n, rng_obs)
    obs_imgs = np.stack([_render_views(scene, z) for z in z_obs])

    arrays = {}

    def add(name, arr, eval_only=False):
        fname = name + ".f32"
        nbytes = write_blob(os.path.join(out_dir, fname), arr)
        arrays[name] = {
            "file": fname,
            "shape": list(arr.shape),
            "dtype": "f32",
            "bytes": nbytes,
            "eval_only": eval_only,
        }

    add("obs", obs_imgs)
    add("labels", z_obs, eval_only=True)

    for pair in pairs:
        for arm, label in (("q", 0), ("q_bar", 1)):
            rng_arm = stream(seed, "dataset", "int", pair.target, arm)
            if anchor_copy:
                mech = pair.q if arm == "q" else pair.q_bar
                z_int = z_obs.copy()
                z_int[:, pair.target] = sm.truncnorm_sample(mech, rng_arm, n)
            else:
                z_int = sm.sample_interventional(scm, pair, arm, n, rng_arm)
            imgs = np.stack([_render_views(scene, z) for z in z_int])
            add(f"int_j{pair.target}_{label}", imgs)

    manifest = {
        "regime": regime,
        "n_points": n,
        "num_views": nviews,
        "image_size": [h, w],
        "num_joints": scm.num_joints,
        "intervened_joints": [p.target for p in pairs],
        "seed": seed,
        "anchor_copy": anchor_copy,
        "scm_hash": spec_hash(scm_desc) if scm_desc is not None else "",
        "scene_hash": spec_hash(scene_desc) if scene_desc is not None else "",
        "arrays": arrays,
    }
    write_manifest(os.path.join(out_dir, MANIFEST_NAME), manifest)
    return manifest
