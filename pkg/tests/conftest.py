import numpy as np
import pytest
import torch

from isdlab.detector import ArchConfig, PredictionGrid, ToyDetector

torch.set_num_threads(1)


def random_grid(rng, shape, n_classes=4, scale=3.0, dtype=torch.float64) -> PredictionGrid:
    logits = torch.as_tensor(rng.normal(0, scale, (*shape, n_classes)), dtype=dtype)
    loc = torch.as_tensor(rng.normal(0, 0.5, (*shape, 4)), dtype=dtype)
    return PredictionGrid(logits.softmax(-1), loc, logits.log_softmax(-1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    """Under 500 parameters: 8x8 input, 4x4 and 2x2 heads, 1x1 head convs."""
    return ArchConfig(image_size=8, num_classes=2, channels=(4, 4), head_stages=(0, 1),
                      scales=(0.3, 0.6), aspect_ratios=(1.0,), head_kernel=1, groups=2)


@pytest.fixture
def tiny_model(tiny_arch):
    torch.manual_seed(0)
    return ToyDetector(tiny_arch).double()
