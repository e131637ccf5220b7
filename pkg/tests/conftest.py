import numpy as np
import pytest

from gapprune.data import blob_splits
from gapprune.model import Model
from gapprune.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def mlp_blobs():
    """Reference MLP trained on 28x28 blobs (10 classes x 200)."""
    train_ds, test_ds = blob_splits(10, 200, 100, (1, 28, 28), seed=0)
    model = Model("mlp", (1, 28, 28), 10, seed=0)
    train(model, train_ds, TrainConfig(epochs=20, batch_size=64, seed=0))
    return model, train_ds, test_ds


@pytest.fixture(scope="session")
def cnn_blobs():
    """MiniCNN trained on 16x16 blobs."""
    train_ds, test_ds = blob_splits(10, 200, 100, (1, 16, 16), seed=0)
    model = Model("minicnn", (1, 16, 16), 10, seed=0)
    train(model, train_ds, TrainConfig(epochs=15, batch_size=64, seed=0))
    return model, train_ds, test_ds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
