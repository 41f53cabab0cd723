import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from darer.data import generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small deterministic corpus shared by model/training/cli tests."""
    return generate_synthetic(num_dialogs=(12, 5, 5), seed=11)
