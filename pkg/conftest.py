import os
import sys

import numpy as np
import pytest

# Add the project root to sys.path so we can import app and config
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.diffusion.processes import NoiseDistribution
from app.diffusion.schedules import make_linear_alpha


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear4():
    return make_linear_alpha(4)


@pytest.fixture
def absorbing8():
    return NoiseDistribution.absorbing(8)


@pytest.fixture
def uniform4():
    return NoiseDistribution.uniform(4)
