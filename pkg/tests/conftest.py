import numpy as np
import pytest
import torch

from meshmotion.body import build_procedural_body

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def body():
    return build_procedural_body()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
