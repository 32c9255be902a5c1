from pathlib import Path

import numpy as np
import pytest

from advsep.datasets import synth_blobs
from advsep.tensor import Layer, MlpModel, init_mlp

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return init_mlp([5, 7, 4], num_classes=3, seed=3)


@pytest.fixture
def blobs3():
    return synth_blobs(3, 60, 6, 0.05, seed=0)


def linear_model(w, b=0.0):
    """One linear layer producing a single scalar representation."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    return MlpModel([Layer(w, np.atleast_1d(np.asarray(b, dtype=np.float64)), "linear")])


def identity_model(m, scale=1.0):
    """H(x) = scale * x on R^m."""
    return MlpModel([Layer(scale * np.eye(m), np.zeros(m), "linear")])


@pytest.fixture(scope="session")
def blobs_config():
    from advsep.config import load_config

    return load_config(CONFIGS / "blobs.yaml")


@pytest.fixture(scope="session")
def blobs_trained(blobs_config):
    """The shipped blobs recipe: splits plus the ours-mode detector calibrated at 1%."""
    from advsep.detector import calibrate_thresholds
    from advsep.pipeline import build_detector, build_splits

    splits, _ = build_splits(blobs_config)
    det = build_detector(blobs_config, splits["train"])
    return splits, calibrate_thresholds(det, splits["calib"], 1.0)


def pytest_terminal_summary(terminalreporter):
    from .acceptance_log import lines

    rows = lines()
    if rows:
        terminalreporter.section("acceptance criteria")
        for row in rows:
            terminalreporter.write_line(row)
