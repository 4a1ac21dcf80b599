import numpy as np
import pytest

from fedsim.datamodules import synth_blobs
from fedsim.numerics import ModelSpec


@pytest.fixture
def tiny_mlp() -> ModelSpec:
    return ModelSpec("mlp", input_dim=4, num_classes=3, hidden_dims=(2,))


@pytest.fixture
def blobs_4class():
    # 200 train / 80 test samples sharing class geometry, different noise.
    train = synth_blobs(200, num_classes=4, num_features=6, cluster_spread=0.8, seed=11)
    test = synth_blobs(80, num_classes=4, num_features=6, cluster_spread=0.8, seed=12)
    return train, test


def random_params(spec: ModelSpec, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(scale=0.7, size=spec.total_params)
