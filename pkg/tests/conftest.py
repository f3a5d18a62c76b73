import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_images(n, size=(64, 32), seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, *size, generator=g, dtype=torch.float64) * 2 - 1).to(dtype)


def random_masks(n, size=(64, 32), seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed + 1)
    return (torch.rand(n, 1, *size, generator=g) > 0.5).to(dtype)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from apparelreid.synthetic import generate_synthetic_corpus

    out = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(out, 4, 2, 2, seed=3, size=(64, 32))
