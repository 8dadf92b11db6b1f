import numpy as np
import pytest
import torch

from dehazekit.data import build_real_dataset, build_synthetic_dataset
from dehazekit.models import DehazeNet, NetConfig

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_paired():
    return build_synthetic_dataset(n=8, seed=7, size=32)


@pytest.fixture(scope="session")
def tiny_real():
    return build_real_dataset(n=8, seed=8, size=32)


@pytest.fixture()
def tiny_teacher():
    return DehazeNet(NetConfig((8, 16), (8, 16), blocks_per_stage=2), role="teacher", seed=3)


@pytest.fixture()
def tiny_student():
    return DehazeNet(NetConfig((4, 8), (4, 8), blocks_per_stage=1), seed=4)


def rand_image(seed, shape=(3, 16, 16)):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(0, 1, size=shape).astype(np.float32))
