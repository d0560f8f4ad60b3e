import numpy as np
import pytest
import torch

from capvqa.config import Config, ModelConfig, StageConfig
from capvqa.model import build_model


def toy_model_config(**overrides) -> ModelConfig:
    """The double-precision gradient-check configuration."""
    base = dict(
        dim=32,
        layers=2,
        heads=4,
        ffn_dim=64,
        dropout=0.0,
        cross_layers=1,
        capsules=4,
        pose_size=2,
        grid_h=4,
        grid_w=4,
        stem_channels=8,
        image_size=16,
        max_text_len=10,
        vocab_size=24,
        answer_vocab_size=6,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model_config(**overrides) -> ModelConfig:
    """Small-but-realistic config for fast unit tests."""
    base = dict(vocab_size=30, answer_vocab_size=12)
    base.update(overrides)
    return ModelConfig.desk_scale(**base)


@pytest.fixture
def toy_model():
    return build_model(toy_model_config(), seed=11)


@pytest.fixture
def tiny_model():
    model = build_model(tiny_model_config(), seed=7)
    model.eval()
    return model


def random_text_batch(batch, length, vocab_size, seed=0):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(5, vocab_size, (batch, length), generator=g)
    ids[:, 0] = 2  # [CLS]
    ids[:, -1] = 3  # [SEP]
    pad = torch.ones(batch, length, dtype=torch.bool)
    return ids, pad


def random_images(batch, size, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, size, size, generator=g, dtype=dtype)
