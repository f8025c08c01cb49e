import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

from nextx.denoiser import DenoiserConfig, VelocityDenoiser, init_parameters
from nextx.rngutil import derive_generator
from nextx.testing import randomize_parameters


def gen(seed: int = 0, role="test") -> torch.Generator:
    return derive_generator(seed, role)


@pytest.fixture
def tiny_model_factory():
    """Build a small randomized denoiser; returns (model, config)."""

    def build(
        token_dim=1, max_tokens=16, num_classes=3, max_entities=4,
        width=32, depth=2, heads=2, seed=0, dtype=torch.float32, **kwargs,
    ):
        config = DenoiserConfig(
            depth=depth, width=width, heads=heads, token_dim=token_dim,
            max_tokens=max_tokens, num_classes=num_classes,
            max_entities=max_entities, **kwargs,
        )
        model = VelocityDenoiser(config)
        if dtype is not torch.float32:
            model = model.to(dtype)
        init_parameters(model, derive_generator(seed, "init"))
        randomize_parameters(model, derive_generator(seed, "randomize"))
        return model, config

    return build
