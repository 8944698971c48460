import numpy as np
import pytest
import torch

from dualreg.model import ModelConfig, RegistrationNet

# Widths small enough that property loops over many inputs stay fast.
TEST_CHANNELS = (8, 8, 16, 16)


def small_model_config(**overrides) -> ModelConfig:
    params = dict(block_channels=TEST_CHANNELS, head_hidden=(32, 16), iterations=2)
    params.update(overrides)
    return ModelConfig(**params)


@pytest.fixture
def model_config():
    return small_model_config()


@pytest.fixture
def model(model_config):
    torch.manual_seed(0)
    torch.set_num_threads(1)
    return RegistrationNet(model_config)


def random_cloud(rng: np.random.Generator, n: int = 32) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, 3))


def cloud_tensor(rng: np.random.Generator, n: int = 32, batch: int = 1, dtype=torch.float32) -> torch.Tensor:
    pts = rng.uniform(-1.0, 1.0, size=(batch, n, 3))
    return torch.as_tensor(pts, dtype=dtype)
