import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from alsrec.synth import planted_blocks  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def two_block():
    """40 x 40, two blocks, within-block density 0.8, no cross-block pairs."""
    return planted_blocks(40, 40, 2, 0.8, 0.0, seed=0)
