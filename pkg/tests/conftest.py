"""Shared fixtures: synthetic data trees, tiny models, quick episodes.

The session-scoped data trees are generated once into a temp directory; the
specs are frozen here so every test sees the same pixels.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # for tests importing oracles

from fds.dataset import SyntheticSpec, build_episode, generate_synthetic, load_mvtec_category
from fds.model import ModelConfig, SegmentationModel

# Frozen data recipes. STRIPES_SPEC doubles as the ablation-experiment
# dataset, so its numbers are part of the acceptance calibration.
STRIPES_SPEC = SyntheticSpec(
    texture_kind="stripes", defect_kind="blob",
    counts=(12, 4, 16), resolution=64, seed=7, n_normal_test=8,
)
CHECKER_SPEC = SyntheticSpec(
    texture_kind="checker", defect_kind="blob",
    counts=(12, 2, 2), resolution=64, seed=7, n_normal_test=2,
)

# One line per acceptance criterion, echoed after the run so the PASS/FAIL
# verdicts survive pytest's output capturing.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    """One tree holding a stripes and a checker category."""
    root = tmp_path_factory.mktemp("synthdata")
    generate_synthetic(STRIPES_SPEC, root)
    generate_synthetic(CHECKER_SPEC, root)
    return root


@pytest.fixture(scope="session")
def stripes_data(synth_root):
    """(normal_train, defect_test_pairs, normal_test) for the stripes category."""
    return load_mvtec_category(synth_root, "stripes")


@pytest.fixture(scope="session")
def checker_data(synth_root):
    return load_mvtec_category(synth_root, "checker")


@pytest.fixture()
def stripes_episode(stripes_data):
    normal_train, defect_pool, _ = stripes_data
    return build_episode(defect_pool, normal_train, k=1, seed=0)


@pytest.fixture()
def tiny_model_factory():
    """Callable building a fresh narrow-profile model from an init seed."""

    def make(init_seed: int = 0) -> SegmentationModel:
        return SegmentationModel(
            ModelConfig.tiny(), init_seed=init_seed, fetch_backbone=False
        )

    return make


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
