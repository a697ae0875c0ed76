import numpy as np
import pytest

from degrade_mt.hrpool import generate_hr_pool
from degrade_mt.img import ImagePlane
from degrade_mt.taskspace import build_taskset
from degrade_mt.train import TrainConfig


@pytest.fixture(scope="session")
def hr_pool():
    return generate_hr_pool(20, seed=3)


@pytest.fixture(scope="session")
def textured_image(hr_pool):
    """A structured grayscale image (edges + texture), 96x96."""
    img = hr_pool[1]
    return ImagePlane(img.data[:, :96, :96])


@pytest.fixture(scope="session")
def tiny_taskset(hr_pool):
    return build_taskset(hr_pool[6:], hr_pool[:6], val_count=3, val_patch=32, seed=0)


@pytest.fixture()
def mini_cfg():
    return TrainConfig(intervals=2, iters_per_interval=15, batch_size=4,
                       samples_per_interval=60, patch_size=32,
                       init_seed=1, data_seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
