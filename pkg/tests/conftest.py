import time

import numpy as np
import pytest

from kpeflow.datasets import load_dataset
from kpeflow.training import TrainConfig, train

# Pinned ring-model recipe shared by the learned-field tests.
RING_TRAIN = dict(steps=20000, seed=0)
RING_DATA_SEED = 7


@pytest.fixture(scope="session")
def ring_model():
    """OT-CFM MLP on the built-in 8-mode ring; returns (field, seconds spent training)."""
    pts, labels, n_labels, _ = load_dataset("ring8", 20000, RING_DATA_SEED)
    t0 = time.perf_counter()
    field = train(TrainConfig(**RING_TRAIN), pts, labels, n_labels)
    return field, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
