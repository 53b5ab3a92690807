import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from plsim.core import LongitudinalDataset, Subject

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

DATA_DIR = Path(__file__).parent / "data"
TRUE_BETA = np.array([3.0, 2.0, 1.0]) / math.sqrt(14)


@pytest.fixture
def toy_csv():
    return DATA_DIR / "toy6.csv"


def random_dataset(rng, n=8, m=3, p=3, q=2, link=np.exp, beta=None, sigma=0.3):
    """Small dataset with a smooth link; ``m`` may be an int or a sequence of sizes."""
    beta = TRUE_BETA if beta is None and p == 3 else beta
    if beta is None:
        beta = np.ones(p) / math.sqrt(p)
    sizes = [m] * n if np.isscalar(m) else list(m)
    subjects = []
    for i, mi in enumerate(sizes):
        x = rng.standard_normal((mi, p))
        z = rng.uniform(size=(mi, q))
        y = link(x @ beta) + z @ np.linspace(1.0, 0.5, q) + sigma * rng.standard_normal(mi)
        subjects.append(Subject(y, x, z, id=i + 1))
    return LongitudinalDataset(tuple(subjects))


@pytest.fixture
def small_data():
    return random_dataset(np.random.default_rng(11), n=30, m=3, p=3, q=1)
