import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


def random_feature_map(gen: torch.Generator, channels: int, height: int, width: int,
                       scale: float = 1.0, dtype=torch.float32, normalized: bool = False):
    from vidcorr.affinity import FeatureMap

    values = torch.rand(channels, height * width, generator=gen, dtype=dtype) * 2 - 1
    values = values * scale
    fmap = FeatureMap(channels, height, width, values)
    return fmap.normalize() if normalized else fmap


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)
