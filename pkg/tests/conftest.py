import hypothesis
import numpy as np
import pytest

from marstag.catalogs import hirise_catalog, mer_catalog

hypothesis.settings.register_profile(
    "ci", max_examples=50, deadline=None, derandomize=True
)
hypothesis.settings.load_profile("ci")


@pytest.fixture(scope="session")
def hirise():
    return hirise_catalog()


@pytest.fixture(scope="session")
def mer():
    return mer_catalog()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
