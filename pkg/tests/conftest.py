import numpy as np
import pytest

from progfreeze import nnet
from progfreeze.cohort import generate_cohort
from progfreeze.nnet import ArchConfig

TINY = ArchConfig(in_size=8, stem_channels=2, widths=(2, 3, 3, 4), blocks=(1, 1, 1, 1), stem_stride=1)


def randomized(arch, seed, scale=0.5):
    """Network with every parameter (biases included) drawn at random.

    Zero biases put many ReLU inputs exactly at the kink, which finite
    differences cannot resolve.
    """
    rng = np.random.default_rng(seed)
    net = nnet.init_network(arch, rng)
    for g in net.groups:
        for k in g.params:
            g.params[k] = rng.normal(0, scale, g.params[k].shape)
    return net


def max_rel_error(a, b, floor=1e-8):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(7, n_pos=12, n_neg=16, signal_strength=0.8,
                           image_model=None)


@pytest.fixture(scope="session")
def full_cohort():
    return generate_cohort(0)
