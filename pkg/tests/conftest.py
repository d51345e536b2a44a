import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from headsplat import AnimationInput, generate_toy_model, init_cloud


@pytest.fixture(scope="session")
def toy_model():
    return generate_toy_model(seed=7, subdivisions=3)


@pytest.fixture(scope="session")
def small_model():
    return generate_toy_model(seed=7, subdivisions=2, n_shape=6, n_expr=3)


@pytest.fixture(scope="session")
def toy_cloud(toy_model):
    return init_cloud(toy_model, AnimationInput.identity(toy_model), k=10)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_screen(rng, n, width, height, spread=1.0, cov_lo=2.0, cov_hi=8.0,
                  op_lo=0.3, op_hi=0.7):
    """Well-conditioned random screen Gaussians for gradient tests: away from
    the alpha clamp, the skip threshold, and the termination boundary."""
    from headsplat.renderer.project import ScreenGaussians

    a = rng.uniform(cov_lo, cov_hi, n)
    c = rng.uniform(cov_lo, cov_hi, n)
    b_lim = 0.8 * np.sqrt(a * c)
    b = rng.uniform(-1, 1, n) * b_lim
    return ScreenGaussians(
        means2d=rng.uniform(0.15 * width, 0.85 * width, size=(n, 2)) * spread,
        cov2d=np.stack([a, b, c], axis=1),
        depths=rng.uniform(1.0, 10.0, n),
        colors=rng.uniform(0.1, 0.9, (n, 3)),
        opacities=rng.uniform(op_lo, op_hi, n),
        index_map=np.arange(n),
    )
