"""Shared test fixtures for WindowQuant."""

import os

# Pin the environment before the package reads its settings
os.environ.setdefault("WINDOWQUANT_LOG_LEVEL", "WARNING")
os.environ.setdefault("WINDOWQUANT_ERROR_LOG_PATH", "")
os.environ.setdefault("WINDOWQUANT_BENCH_WORKERS", "2")

import numpy as np
import pytest

from windowquant.model import ToyModelSpec
from windowquant.scene import SyntheticScene


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def small_model():
    """Two layers, two heads of four dims: embed_dim 8."""
    return ToyModelSpec(layers=2, heads=2, head_dim=4, vocab=32, seed=7)


@pytest.fixture
def model():
    return ToyModelSpec(layers=4, heads=2, head_dim=8, vocab=64, seed=3)


@pytest.fixture
def small_scene():
    """Eight windows of four tokens, window 3 relevant to the prompt."""
    return SyntheticScene(
        num_frames=8, tokens_per_frame=4, text_tokens=4, window_size=4,
        relevant_window_ids=(3,), seed=11,
    )
