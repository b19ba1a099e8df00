"""Stage orchestration: dataset -> compression -> score estimation ->
disentanglement -> evaluation.

Each stage writes an atomic checkpoint tagged with the config hash; a stage
runs only when its checkpoint is missing or stale and all predecessors are
present and hash-matched.  Training stages read the dataset through a
label-blind view, and every blob access lands in an audit log that the eval
stage persists.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import dataset as D
from . import estimators as E
from . import evaluate as ev
from . import nets as N
from .rng import derive_seed, stream


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


class MissingStageError(StageError):
    """A stage was requested before its predecessors completed."""


def worker_count(num_tasks):
    """Parallel width for per-joint stages, capped by ROPES_THREADS."""
    cap = os.environ.get("ROPES_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(num_tasks, limit))


class PipelineState:
    """Paths and stage bookkeeping for one run directory."""

    def __init__(self, run_dir, config, log=None):
        self.run_dir = run_dir
        self.config = config
        self.config_hash = D.spec_hash(config.canonical())
        self.audit = D.AccessAudit()
        self._log = log
        os.makedirs(run_dir, exist_ok=True)

    def log(self, msg):
        if self._log is not None:
            self._log(msg)

    # -- layout ---------------------------------------------------------
    @property
    def dataset_dir(self):
        return os.path.join(self.run_dir, "dataset")

    @property
    def ae1_dir(self):
        return os.path.join(self.run_dir, "ae1")

    def ldr_dir(self, joint):
        return os.path.join(self.run_dir, f"ldr_j{joint}")

    def ae2_dir(self, joint):
        return os.path.join(self.run_dir, f"ae2_j{joint}")

    @property
    def eval_dir(self):
        return os.path.join(self.run_dir, "eval")

    # -- stage freshness ------------------------------------------------
    def _checkpoint_fresh(self, directory):
        path = os.path.join(directory, "checkpoint.json")
        if not os.path.exists(path):
            return False
        with open(path, encoding="utf-8") as f:
            meta = json.load(f)
        return meta.get("extra", {}).get("config_hash") == self.config_hash

    def dataset_fresh(self):
        path = os.path.join(self.dataset_dir, D.MANIFEST_NAME)
        if not os.path.exists(path):
            return False
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
        return manifest.get("config_hash") == self.config_hash

    def ae1_fresh(self):
        return self._checkpoint_fresh(self.ae1_dir)

    def ldr_fresh(self, joint):
        return self._checkpoint_fresh(self.ldr_dir(joint))

    def ae2_fresh(self, joint):
        return self._checkpoint_fresh(self.ae2_dir(joint))

    def ae2_joints(self):
        """Directories holding AE2 checkpoints: one per joint, or a single
        multi-target model when the joint flag is set."""
        if self.config.raw["pipeline"]["joint_ae2"]:
            return [("all", os.path.join(self.run_dir, "ae2_joint"))]
        return [(j, self.ae2_dir(j)) for j in self.config.intervened_joints]

    def reader(self, stage, blind=True):
        reader = D.DatasetReader(self.dataset_dir, audit=self.audit,
                                 stage=stage)
        return reader.training_view(stage) if blind else reader

    def require(self, condition, what):
        if not condition:
            raise MissingStageError(
                f"stage {what!r} has no fresh checkpoint for this config; "
                "run it first (stages resume at whole-stage granularity)"
            )


# ---------------------------------------------------------------------------
# stages


def ensure_dataset(state: PipelineState):
    if state.dataset_fresh():
        state.log("dataset: fresh, skipping")
        return
    cfg = state.config
    state.log("dataset: generating")
    manifest = D.generate_dataset(
        cfg.build_scm(), cfg.build_pairs(), cfg.build_scene(),
        n=cfg.raw["pipeline"]["n_points"], seed=cfg.seed,
        out_dir=state.dataset_dir,
        regime="single-view" if len(cfg.raw["scene"]["views"]) == 1
        else "multi-view",
        anchor_copy=cfg.raw["pipeline"]["anchor_copy"],
        scm_desc=cfg.canonical()["scm"], scene_desc=cfg.canonical()["scene"],
    )
    manifest["config_hash"] = state.config_hash
    D.write_manifest(os.path.join(state.dataset_dir, D.MANIFEST_NAME),
                     manifest)


def _stack_views(images):
    """(n, V, H, W) image array -> (n*V, H, W, 1) single-view batch."""
    n, v, h, w = images.shape
    return images.reshape(n * v, h, w, 1)


def _encode_views(compressor, images):
    """(n, V, H, W) -> (n, h, w, V): per-view features stacked on channels."""
    n, v, h, w = images.shape
    feats = compressor.transform(images.reshape(n * v, h, w, 1))
    fh, fw = feats.shape[1:3]
    return feats.reshape(n, v, fh, fw).transpose(0, 2, 3, 1)


def _load_compressor(state):
    state.require(state.ae1_fresh(), "train-ae1")
    store, specs, extra = N.load_checkpoint(state.ae1_dir)
    comp = E.Ae1Compressor(**{k: extra["params"][k]
                              for k in E.Ae1Compressor._param_names})
    comp.store_ = store
    comp.encoder_spec_ = specs["encoder"]
    comp.decoder_spec_ = specs["decoder"]
    comp.encoder_ = N.Network(specs["encoder"], store, prefix="enc_")
    comp.decoder_ = N.Network(specs["decoder"], store, prefix="dec_")
    return comp


def train_ae1(state: PipelineState):
    if state.ae1_fresh():
        state.log("ae1: fresh, skipping")
        return
    cfg = state.config
    reader = state.reader("ae1")
    images = [reader.load(name) for name in sorted(reader.arrays)]
    x = np.concatenate([_stack_views(a) for a in images])
    params = dict(cfg.raw["pipeline"]["ae1"])
    comp = E.Ae1Compressor(steps=int(params["steps"]),
                           batch_size=int(params["batch_size"]),
                           lr=params["lr"],
                           widths=tuple(cfg.raw["pipeline"]["widths"]),
                           seed=derive_seed(cfg.seed, "stage", "ae1"))
    state.log(f"ae1: training on {len(x)} images")
    comp.fit(x, log=state.log)
    final_mse = float(np.mean(comp.loss_curve_[-50:]))
    N.save_checkpoint(
        state.ae1_dir, comp.store_,
        {"encoder": comp.encoder_spec_, "decoder": comp.decoder_spec_},
        extra={"config_hash": state.config_hash,
               "final_mse": final_mse,
               "loss_curve_tail": comp.loss_curve_[-10:].tolist(),
               "params": comp.get_params()},
    )
    state.log(f"ae1: done, final mse {final_mse:.6f}")


def _train_ldr_one(state, comp, joint):
    cfg = state.config
    reader = state.reader("ldr")
    y_q = _encode_views(comp, reader.load(f"int_j{joint}_0"))
    y_qbar = _encode_views(comp, reader.load(f"int_j{joint}_1"))
    y = np.concatenate([y_q, y_qbar])
    labels = np.concatenate([np.zeros(len(y_q)), np.ones(len(y_qbar))])
    params = dict(cfg.raw["pipeline"]["ldr"])
    clf = E.LdrClassifier(steps=int(params["steps"]),
                          batch_size=int(params["batch_size"]),
                          lr=params["lr"],
                          plateau_tol=params["plateau_tol"],
                          plateau_window=int(params["plateau_window"]),
                          dense_width=int(params["dense_width"]),
                          seed=derive_seed(cfg.seed, "stage", "ldr", joint))
    clf.fit(y, labels)
    N.save_checkpoint(
        state.ldr_dir(joint), clf.store_, {"classifier": clf.spec_},
        extra={"config_hash": state.config_hash,
               "joint": joint,
               "final_loss": clf.final_loss_,
               "steps_run": len(clf.loss_curve_),
               "params": clf.get_params()},
    )
    state.log(f"ldr joint {joint}: {len(clf.loss_curve_)} steps, "
              f"final loss {clf.final_loss_:.4f}")


def train_ldr(state: PipelineState, joints=None):
    state.require(state.dataset_fresh(), "gen-data")
    state.require(state.ae1_fresh(), "train-ae1")
    if joints is None:
        joints = state.config.intervened_joints
    todo = [j for j in joints if not state.ldr_fresh(j)]
    for j in set(joints) - set(todo):
        state.log(f"ldr joint {j}: fresh, skipping")
    if not todo:
        return
    comp = _load_compressor(state)
    workers = worker_count(len(todo))
    state.log(f"ldr: training joints {todo} with {workers} workers")
    if workers == 1:
        for j in todo:
            _train_ldr_one(state, comp, j)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_ldr_one, state, comp, j)
                       for j in todo]
            for f in futures:
                f.result()


def _load_ldr(state, joint):
    state.require(state.ldr_fresh(joint), f"train-ldr (joint {joint})")
    store, specs, extra = N.load_checkpoint(state.ldr_dir(joint))
    clf = E.LdrClassifier(**{k: extra["params"][k]
                             for k in E.LdrClassifier._param_names})
    clf.store_ = store
    clf.spec_ = specs["classifier"]
    clf.net_ = N.Network(specs["classifier"], store)
    return clf


def _pair_features(state, comp, joint):
    reader = state.reader("ae2")
    y_q = _encode_views(comp, reader.load(f"int_j{joint}_0"))
    y_qbar = _encode_views(comp, reader.load(f"int_j{joint}_1"))
    return y_q, y_qbar


def _train_ae2_model(state, comp, joints, out_dir, tag):
    cfg = state.config
    pair_data = {}
    for j in joints:
        y_q, y_qbar = _pair_features(state, comp, j)
        clf = _load_ldr(state, j)
        pair_data[j] = (y_q, y_qbar, clf.score_diff(y_q),
                        clf.score_diff(y_qbar),
                        clf.predict_logit(y_q), clf.predict_logit(y_qbar))
    params = dict(cfg.raw["pipeline"]["ae2"])
    model = E.DisentanglingAutoencoder(
        latent_dim=cfg.num_joints, targets=tuple(joints),
        lam=cfg.raw["pipeline"]["lambda"],
        steps=int(params["steps"]), batch_size=int(params["batch_size"]),
        lr=params["lr"], widths=tuple(cfg.raw["pipeline"]["widths"]),
        restarts=int(params["restarts"]),
        probe_steps=int(params["probe_steps"]),
        anchor_steps=int(params["anchor_steps"]),
        anchor_weight=params["anchor_weight"],
        seed=derive_seed(cfg.seed, "stage", "ae2", tag))
    model.fit(pair_data)
    N.save_checkpoint(
        out_dir, model.store_,
        {"encoder": model.encoder_spec_, "decoder": model.decoder_spec_},
        extra={"config_hash": state.config_hash,
               "targets": list(joints),
               "final_recon": float(np.mean(model.recon_curve_[-50:])),
               "final_sparsity": float(np.mean(model.sparsity_curve_[-50:])),
               "params": {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in model.get_params().items()}},
    )
    state.log(f"ae2 {tag}: recon {np.mean(model.recon_curve_[-50:]):.5f} "
              f"sparsity {np.mean(model.sparsity_curve_[-50:]):.5f}")


def train_ae2(state: PipelineState, joints=None):
    state.require(state.dataset_fresh(), "gen-data")
    state.require(state.ae1_fresh(), "train-ae1")
    cfg = state.config
    comp = _load_compressor(state)
    if cfg.raw["pipeline"]["joint_ae2"]:
        tag, out_dir = state.ae2_joints()[0]
        if state._checkpoint_fresh(out_dir):
            state.log("ae2 joint-model: fresh, skipping")
            return
        _train_ae2_model(state, comp, cfg.intervened_joints, out_dir, tag)
        return
    if joints is None:
        joints = cfg.intervened_joints
    todo = [j for j in joints if not state.ae2_fresh(j)]
    for j in set(joints) - set(todo):
        state.log(f"ae2 joint {j}: fresh, skipping")
    if not todo:
        return
    workers = worker_count(len(todo))
    state.log(f"ae2: training joints {todo} with {workers} workers")

    def run(j):
        _train_ae2_model(state, comp, [j], state.ae2_dir(j), str(j))

    if workers == 1:
        for j in todo:
            run(j)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run, j) for j in todo]
            for f in futures:
                f.result()


def _load_ae2(state, directory):
    store, specs, extra = N.load_checkpoint(directory)
    params = dict(extra["params"])
    params["targets"] = tuple(params["targets"])
    params["widths"] = tuple(params["widths"])
    model = E.DisentanglingAutoencoder(**{
        k: params[k] for k in E.DisentanglingAutoencoder._param_names})
    model.store_ = store
    model.encoder_spec_ = specs["encoder"]
    model.decoder_spec_ = specs["decoder"]
    model.encoder_ = N.Network(specs["encoder"], store, prefix="enc_")
    model.decoder_ = N.Network(specs["decoder"], store, prefix="dec_")
    return model


def recover_latents(state: PipelineState, images):
    """(n, V, H, W) images -> (n, d) recovered pose coordinates."""
    comp = _load_compressor(state)
    feats = _encode_views(comp, images)
    cfg = state.config
    if cfg.raw["pipeline"]["joint_ae2"]:
        _, directory = state.ae2_joints()[0]
        state.require(state._checkpoint_fresh(directory), "train-ae2")
        return _load_ae2(state, directory).transform(feats)
    latents = np.zeros((len(images), cfg.num_joints))
    for j, directory in state.ae2_joints():
        state.require(state._checkpoint_fresh(directory),
                      f"train-ae2 (joint {j})")
        latents[:, j] = _load_ae2(state, directory).transform(feats)[:, j]
    return latents


def run_eval(state: PipelineState, occlusion_sizes=None):
    cfg = state.config
    state.require(state.dataset_fresh(), "gen-data")
    os.makedirs(state.eval_dir, exist_ok=True)
    reader = state.reader("eval", blind=False)
    images = reader.load("obs")
    truth = reader.load("labels")
    ecfg = cfg.raw["eval"]
    mode = "assignment" if cfg.raw["pipeline"]["joint_ae2"] else "per-joint"
    latents = recover_latents(state, images)
    results = ev.evaluate_protocol(
        latents, truth, stream(cfg.seed, "eval", "protocol"),
        calibration_samples=ecfg["calibration_samples"],
        test_samples=ecfg["test_samples"], repeats=ecfg["repeats"],
        mode=mode)
    state.log("eval: clean mcc " +
              np.array2string(results["mcc_mean"], precision=3))

    occlusion = {}
    sizes = ecfg["occlusion_sizes"] if occlusion_sizes is None else occlusion_sizes
    for size in sizes:
        occluded = ev.apply_occlusions(
            images, size, stream(cfg.seed, "eval", "occlusion", size),
            value=ecfg["occlusion_value"])
        lat_occ = recover_latents(state, occluded)
        occlusion[size] = ev.evaluate_protocol(
            lat_occ, truth, stream(cfg.seed, "eval", "protocol", size),
            calibration_samples=ecfg["calibration_samples"],
            test_samples=ecfg["test_samples"], repeats=ecfg["repeats"],
            mode=mode)
        state.log(f"eval: occlusion {size}x{size} mcc " +
                  np.array2string(occlusion[size]["mcc_mean"], precision=3))

    report = ev.report_to_json(results, cfg.num_joints,
                               reader.manifest["regime"],
                               occlusion=occlusion, seed=cfg.seed)
    report["config_hash"] = state.config_hash
    path = os.path.join(state.eval_dir, "report.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    state.audit.dump(os.path.join(state.eval_dir, "access_audit.json"))
    emit_plots(state, latents, truth, results)
    return report


def emit_plots(state: PipelineState, latents=None, truth=None, results=None):
    cfg = state.config
    os.makedirs(state.eval_dir, exist_ok=True)
    if latents is None:
        state.require(state.dataset_fresh(), "gen-data")
        reader = state.reader("eval", blind=False)
        images = reader.load("obs")
        truth = reader.load("labels")
        ecfg = cfg.raw["eval"]
        mode = ("assignment" if cfg.raw["pipeline"]["joint_ae2"]
                else "per-joint")
        latents = recover_latents(state, images)
        results = ev.evaluate_protocol(
            latents, truth, stream(cfg.seed, "eval", "protocol"),
            calibration_samples=ecfg["calibration_samples"],
            test_samples=ecfg["test_samples"], repeats=ecfg["repeats"],
            mode=mode)
    for j in range(cfg.num_joints):
        ev.emit_scatter(
            latents[:, j], truth[:, j], results["calibration"][j],
            os.path.join(state.eval_dir, f"scatter_j{j}.svg"),
            joint=j, mcc=float(results["mcc_mean"][j]),
            mse=float(results["mse_mean"][j]))
    state.log(f"plots: wrote {cfg.num_joints} scatter files")


def run_full_pipeline(config, run_dir, log=None) -> PipelineState:
    state = PipelineState(run_dir, config, log=log)
    stages = [
        ("gen-data", lambda: ensure_dataset(state)),
        ("train-ae1", lambda: train_ae1(state)),
        ("train-ldr", lambda: train_ldr(state)),
        ("train-ae2", lambda: train_ae2(state)),
        ("eval", lambda: run_eval(state)),
    ]
    for name, fn in stages:
        t0 = time.time()
        try:
            fn()
        except MissingStageError:
            raise
        except Exception as exc:
            raise StageError(
                f"stage {name!r} failed: {exc}; fix the cause and rerun, "
                "completed stages will be skipped"
            ) from exc
        state.log(f"stage {name}: {time.time() - t0:.1f}s")
    label_stages = state.audit.stages_for("labels.f32")
    if any(s != "eval" for s in label_stages):
        raise StageError(
            f"label blindness violated: labels.f32 accessed by {label_stages}"
        )
    return state
