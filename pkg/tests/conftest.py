import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # expose oracles.py to tests

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def repo_root():
    return REPO_ROOT
