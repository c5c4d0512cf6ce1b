import os
import tempfile

# The logger reads this at import time, before any src module loads.
os.environ.setdefault("GCD_LOG_DIR", tempfile.mkdtemp(prefix="gcd_lab_logs_"))

import numpy as np
import pytest

from src.dataset import GcdDataset, generate
from src.models import GenConfig, ModelConfig, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds() -> GcdDataset:
    """4 classes (2 old), 12 samples each, D=5."""
    return generate(GenConfig(num_classes=4, samples_per_class=12, feature_dim=5,
                              class_radius=6.0, seed=3))


@pytest.fixture
def small_model_cfg() -> ModelConfig:
    return ModelConfig(feature_dim=5, hidden_dim=6, projection_dim=4, num_prototypes=4, seed=1)


@pytest.fixture
def fast_train_cfg() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=16, tau_t_warmup_epochs=1, seed=5)


@pytest.fixture
def tiny_ds() -> GcdDataset:
    """Eight rows, classes 0 and 1 old with two labelled rows each."""
    rng = np.random.default_rng(7)
    return GcdDataset(features=rng.standard_normal((8, 5)),
                      labels=np.array([0, 0, 0, 1, 1, 1, 2, 3]),
                      labelled_mask=np.array([True, True, False, True, True, False, False, False]),
                      old_classes=frozenset({0, 1}),
                      num_classes=4)
