import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tinyqat import tensor as T


@pytest.fixture(autouse=True)
def _float64_strict():
    """Unit tests run in 64-bit with NaN/Inf checks on; restore afterwards."""
    T.set_default_dtype(np.float64)
    T.set_strict_numerics(True)
    yield
    T.set_default_dtype(np.float64)
    T.set_strict_numerics(True)
