import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from floatarm.dynamics import shipped_params


@pytest.fixture(scope="session")
def params():
    return shipped_params()


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.Philox(1234))
