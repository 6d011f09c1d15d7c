import numpy as np
import pytest

from fragfit import features as F
from fragfit.synthetic import synthetic_target


def central_difference(energy, x, h=1e-5):
    """Numerical gradient of a scalar function of an (N, 3) array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (energy(xp) - energy(xm)) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def target60():
    """A 60-residue synthetic chain, its full sequence and oracle labels."""
    structure, sequence = synthetic_target(60, seed=7)
    labels = F.generate_labels(structure, F.CoarseGrid.around(structure))
    return structure, sequence, labels
