import pytest
import torch


def pytest_addoption(parser):
    parser.addoption('--seed', type=int, default=42, help='seed for randomized invariant tests')


@pytest.fixture
def seed(request):
    return request.config.getoption('--seed')


@pytest.fixture
def generator(seed):
    return torch.Generator().manual_seed(seed)
