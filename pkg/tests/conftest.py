import numpy as np
import pytest

from synbridge.dataio import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data():
    spec = SyntheticSpec(
        num_categories=8, num_base=4, latent_dim=4, visual_dim=12, semantic_dim=8,
        samples_per_category=25, visual_noise=0.2, seed=3,
    )
    return generate_synthetic(spec)
