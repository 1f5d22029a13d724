import numpy as np
import pytest


def max_rel_diff(a, b) -> float:
    """Scale-normalized max deviation: max|a-b| / max(1, max|a|, max|b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)),
                float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
