"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 config error, 3 stage failure.
Each run appends to ``run.log`` in the run directory and holds a lock file
so only one process writes to a run directory at a time.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

from . import __version__
from . import config as C
from . import pipeline as P

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3

COMMANDS = ("gen-data", "train-ae1", "train-ldr", "train-ae2", "eval",
            "occlusion-eval", "plot", "full")


def version_string():
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0 and out.stdout.strip():
            return f"ropes-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"ropes-{__version__}"


class RunLock:
    """Exclusive lock file guarding a run directory."""

    def __init__(self, run_dir):
        self.path = os.path.join(run_dir, ".lock")
        self._held = False

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked by another process ({self.path}); "
                "remove the lock file if that process is gone"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        self._held = True
        return self

    def __exit__(self, *exc):
        if self._held:
            try:
                os.remove(self.path)
            except OSError:
                pass
        return False


class RunLogger:
    def __init__(self, run_dir):
        os.makedirs(run_dir, exist_ok=True)
        self.path = os.path.join(run_dir, "run.log")

    def __call__(self, msg):
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        line = f"[{stamp}] {msg}"
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")
        print(line, file=sys.stderr)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ropes",
        description="Interventional pose recovery pipeline: dataset "
        "generation, staged training, and label-free evaluation.",
    )
    parser.add_argument("command", choices=COMMANDS)
    src = parser.add_mutually_exclusive_group()
    src.add_argument("--config", help="path to a run config JSON file")
    src.add_argument("--preset", default="single_view_3joint",
                     help="shipped preset name (default: %(default)s)")
    parser.add_argument("--out", help="run directory (overrides config)")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--lambda", dest="lam", type=float,
                        help="sparsity weight override")
    parser.add_argument("--joint", type=int, action="append",
                        help="restrict train-ldr/train-ae2 to this joint "
                        "(repeatable)")
    parser.add_argument("--version", action="version",
                        version=version_string())
    return parser


def _load_config(args):
    if args.config:
        cfg = C.parse_config(args.config)
    else:
        cfg = C.load_preset(args.preset)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lam is not None:
        overrides["pipeline.lambda"] = args.lam
    if overrides:
        raw = json.loads(json.dumps(cfg.canonical()))
        raw["out_dir"] = cfg.raw["out_dir"]
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.lam is not None:
            raw["pipeline"]["lambda"] = args.lam
        cfg = C.RunConfig(raw)
    return cfg, overrides


def _resolve_run_dir(args, cfg):
    if args.out:
        return args.out
    if cfg.raw["out_dir"]:
        return cfg.raw["out_dir"]
    name = args.preset if not args.config else "run"
    return os.path.join("runs", name)


def dispatch(command, state, joints=None):
    if command == "gen-data":
        P.ensure_dataset(state)
    elif command == "train-ae1":
        P.ensure_dataset(state)
        P.train_ae1(state)
    elif command == "train-ldr":
        P.train_ldr(state, joints=joints)
    elif command == "train-ae2":
        P.train_ae2(state, joints=joints)
    elif command == "eval":
        P.run_eval(state)
    elif command == "occlusion-eval":
        P.run_eval(state)
    elif command == "plot":
        P.emit_plots(state)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown command {command!r}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        cfg, overrides = _load_config(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run_dir = _resolve_run_dir(args, cfg)
    log = RunLogger(run_dir)
    try:
        with RunLock(run_dir):
            state = P.PipelineState(run_dir, cfg, log=log)
            log(f"command {args.command} | version {version_string()} | "
                f"seed {cfg.seed} | config hash {state.config_hash}")
            if overrides:
                log(f"overrides: {overrides}")
            t0 = time.time()
            if args.command == "full":
                P.run_full_pipeline(cfg, run_dir, log=log)
            else:
                dispatch(args.command, state, joints=args.joint)
            log(f"command {args.command} finished in {time.time() - t0:.1f}s")
    except P.MissingStageError as exc:
        log(f"error: {exc}")
        return EXIT_STAGE
    except P.StageError as exc:
        log(f"error: {exc}")
        return EXIT_STAGE
    except RuntimeError as exc:
        log(f"error: {exc}")
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
