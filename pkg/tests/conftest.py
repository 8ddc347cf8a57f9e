import numpy as np
import pytest

from couda.model import Architecture, build_model


@pytest.fixture
def small_arch():
    # K=3 classes, feature width d=16
    return Architecture(in_dim=4, n_classes=3, extractor_widths=(8, 16), disc_hidden=(16, 16))


@pytest.fixture
def small_model(small_arch):
    model = build_model(small_arch, seed=7, eps_init=0.8)
    # random noise-layer weights so the feature-conditioned path is exercised
    rng = np.random.default_rng(70)
    model.noise_layer.weight.data = rng.normal(scale=0.3, size=model.noise_layer.weight.shape)
    return model


@pytest.fixture
def batches():
    rng = np.random.default_rng(123)
    xs = rng.normal(size=(6, 4))
    xt = rng.normal(loc=0.5, size=(5, 4))
    zs = rng.integers(0, 3, size=6)
    return xs, zs, xt
