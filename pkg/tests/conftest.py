import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


@pytest.fixture
def torch_seed():
    torch.manual_seed(20240817)
    return 20240817


def to_t(arr, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=dtype)
