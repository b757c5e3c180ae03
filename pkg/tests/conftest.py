import numpy as np
import pytest

from spkmtl.model import ExtractorConfig


@pytest.fixture
def tiny_extractor() -> ExtractorConfig:
    """Small TDNN used throughout: input 4, layer dims 8, embedding 6."""
    return ExtractorConfig(
        input_dim=4,
        frame_layers=(((-1, 0, 1), 8), ((0,), 8), ((0,), 16)),
        embedding_dim=6,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
