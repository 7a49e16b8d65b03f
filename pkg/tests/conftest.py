import numpy as np
import pytest

from utilities.evaluation import generate_synthetic
from utilities.models import build_zoo, create_model, train_zoo

SMALL_SHAPE = (3, 8, 8)
NUM_CLASSES = 4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def small_data():
    return generate_synthetic(160, NUM_CLASSES, SMALL_SHAPE, signal=0.05, noise=0.1, seed=3)


@pytest.fixture(scope='session')
def small_zoo():
    """One untrained model per architecture on (3, 8, 8) inputs."""
    return build_zoo(['Linear', 'Mlp', 'SmallConv', 'TinyAttention'], 5, SMALL_SHAPE, NUM_CLASSES)


@pytest.fixture(scope='session')
def trained_small_zoo(small_data):
    models = build_zoo(['Linear', 'Mlp', 'SmallConv', 'TinyAttention'], 11, SMALL_SHAPE, NUM_CLASSES)
    return train_zoo(models, small_data, epochs=8, seed=11)


@pytest.fixture
def mlp():
    return create_model('Mlp', SMALL_SHAPE, NUM_CLASSES, seed=7)
