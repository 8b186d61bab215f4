import numpy as np
import pytest
import torch

from tokbeam.channel import CsiSample, TaskSpec, Utility, generate_rayleigh


@pytest.fixture
def small_samples():
    return generate_rayleigh(11, TaskSpec(Utility.SR, 3, 4), 12)


def make_sample(h, noise=1.0, p_max=1.0, sid=0):
    h = np.atleast_2d(np.asarray(h, dtype=complex))
    return CsiSample(sid, h, np.full(h.shape[0], noise), p_max)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
