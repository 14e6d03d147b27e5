import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctclab.synthgen import GenConfig, generate, write_dataset

settings.register_profile("ctclab", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ctclab")


def log_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=1, keepdims=True)
    return x - (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))


@pytest.fixture(scope="session")
def small_cfg():
    return GenConfig(num_glosses=6, num_sentences=60, min_len=2, max_len=4)


@pytest.fixture(scope="session")
def small_dataset(small_cfg):
    return generate(small_cfg, seed=11)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory, small_dataset):
    d = tmp_path_factory.mktemp("data")
    write_dataset(small_dataset, d)
    return d
