import copy
import json

import pytest

import ropes.config as C
import ropes.pipeline as P

MICRO_RAW = {
    "seed": 1,
    "scm": {
        "mode": "independent",
        "joints": [
            {
                "observational": {"mu": 0.0, "sigma2": 1.0,
                                  "lo": -1.5, "hi": 1.5},
                "interventions": [
                    {"mu": -0.75, "sigma2": 0.5, "lo": -1.5, "hi": 1.5},
                    {"mu": 0.75, "sigma2": 0.5, "lo": -1.5, "hi": 1.5},
                ],
            },
            {
                "observational": {"mu": 1.5, "sigma2": 1.0,
                                  "lo": 0.0, "hi": 3.0},
                "interventions": [
                    {"mu": 2.25, "sigma2": 0.5, "lo": 0.0, "hi": 3.0},
                    {"mu": 0.75, "sigma2": 0.5, "lo": 0.0, "hi": 3.0},
                ],
            },
        ],
    },
    "scene": {
        "link_lengths": [1.0, 0.8],
        "axis_pattern": "in-plane",
        "link_radius": 0.35,
        "image_size": [32, 32],
        "views": [{"yaw": 0.0, "pitch": 0.0, "scale": 5.0,
                   "center": [15.5, 15.5]}],
    },
    "pipeline": {
        "n_points": 40,
        "lambda": 1.0,
        "widths": [8, 8],
        "ae1": {"steps": 10, "batch_size": 8},
        "ldr": {"steps": 20, "batch_size": 8},
        "ae2": {"steps": 10, "batch_size": 8},
    },
    "eval": {
        "calibration_samples": 25,
        "test_samples": 10,
        "repeats": 2,
        "occlusion_sizes": [4],
    },
}


def micro_raw():
    return copy.deepcopy(MICRO_RAW)


@pytest.fixture()
def micro_config():
    return C.RunConfig(micro_raw())


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """One completed micro pipeline run, shared read-only by tests."""
    run_dir = str(tmp_path_factory.mktemp("micro_run"))
    cfg = C.RunConfig(micro_raw())
    state = P.run_full_pipeline(cfg, run_dir)
    return state


@pytest.fixture()
def micro_config_file(tmp_path):
    path = tmp_path / "micro.json"
    path.write_text(json.dumps(micro_raw()))
    return str(path)
