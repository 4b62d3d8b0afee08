import numpy as np
import pytest

from duet.codec import build_codec, sample_corpus
from duet.model import BackboneConfig, init_params
from duet.numerics import Rng, set_default_dtype


@pytest.fixture(autouse=True)
def float64_default():
    """Unit tests run at float64; anything needing float32 sets it locally."""
    set_default_dtype("float64")
    yield
    set_default_dtype("float64")


@pytest.fixture
def tiny_config():
    return BackboneConfig(width=16, layers=2, heads=2, frame_dim=4, speaker_dim=4,
                          cond_dim=8, max_len=48, vocab=8, head_layers=2, head_width=8)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, Rng(5))


@pytest.fixture(scope="session")
def small_codec():
    return build_codec(seed=3, V=8, d=4, K=2, gamma=0.3, sigma_obs=0.02)


@pytest.fixture(scope="session")
def small_corpus(small_codec):
    return sample_corpus(small_codec, n_train=4, n_val=2, length_range=(2, 4),
                         n_speakers=2, n_val_speakers=1, seed=13)


@pytest.fixture
def rng():
    return Rng(77)


def assert_tensors_equal(a: dict, b: dict):
    assert sorted(a) == sorted(b)
    for k in a:
        x = a[k].data if hasattr(a[k], "data") else a[k]
        y = b[k].data if hasattr(b[k], "data") else b[k]
        assert x.dtype == y.dtype, k
        assert np.array_equal(x, y), f"tensor {k} differs"
