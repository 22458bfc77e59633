import numpy as np
import pytest

from nbnnda.types import DescriptorBag, DomainDataset


def random_dataset(rng, name="ds", n_classes=3, bags_per_class=4, desc_per_bag=(3, 8), dim=8, loc=None):
    bags = []
    for c in range(1, n_classes + 1):
        for i in range(bags_per_class):
            m = int(rng.integers(desc_per_bag[0], desc_per_bag[1] + 1))
            centre = 0.0 if loc is None else loc[c - 1]
            bags.append(DescriptorBag(centre + rng.normal(size=(m, dim)), c, name, f"{name}-{c}-{i}"))
    return DomainDataset(name, tuple(range(1, n_classes + 1)), tuple(bags), dim)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_dataset():
    return random_dataset
