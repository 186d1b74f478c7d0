import numpy as np
import pytest
import torch

from pldg.backbone import EncoderConfig, build_encoder
from pldg.data import TrapSpec, generate_trap


@pytest.fixture
def micro_config():
    return EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2, num_classes=2)


@pytest.fixture
def micro_encoder(micro_config):
    return build_encoder(micro_config, seed=0).eval()


@pytest.fixture
def micro_encoder64(micro_config):
    return build_encoder(micro_config, seed=0, dtype=torch.float64).eval()


@pytest.fixture(scope="session")
def small_trap():
    spec = TrapSpec(rho=0.9, artifacts=("corner_patch",), image_size=16, n_train=64, n_val=40, n_test_id=40, n_test_ood=40, seed=3)
    return generate_trap(spec)


@pytest.fixture
def images16():
    g = torch.Generator().manual_seed(0)
    return torch.rand(4, 3, 16, 16, generator=g)


def rng(seed=0):
    return np.random.default_rng(seed)
