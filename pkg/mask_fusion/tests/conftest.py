"""Shared fixtures: per-test log directories, small phantoms and a tiny persisted corpus."""

import os

import numpy as np
import pytest
import torch

from mask_fusion.core.logging_config import setup_logging
from mask_fusion.core.synth import Corpus, PhantomSpec, build_corpus, generate_phantom

TINY = 32


def pytest_collection_modifyitems(config, items):
    if os.getenv("MASK_FUSION_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set MASK_FUSION_SLOW=1 to run training-trend checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def log_dir(tmp_path):
    path = tmp_path / "logs"
    setup_logging(log_dir=str(path), debug_mode=True, preserve_logs=False)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(PhantomSpec(size=TINY, seed=3))


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(root, n_train=3, n_test=2, d_vox=8, seed=7, size=TINY, n_eval=1)
    return root


@pytest.fixture
def corpus(corpus_dir):
    return Corpus.open(corpus_dir)
