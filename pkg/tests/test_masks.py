import numpy as np
import pytest
import torch

from isdlab.masks import objectness_mask, type_masks
from tests.conftest import random_grid


@pytest.mark.parametrize("row, expected", [
    ([0.6, 0.3, 0.1], False),
    ([0.2, 0.7, 0.1], True),
    ([0.5, 0.5, 0.0], False),   # tie goes to background
    ([0.4, 0.3, 0.3], False),
    ([0.3, 0.3, 0.4], True),
])
def test_objectness_rows(row, expected):
    assert bool(objectness_mask(torch.tensor([row]))[0]) is expected


def test_objectness_two_class_tie():
    assert not objectness_mask(torch.tensor([[0.5, 0.5]]))[0]


def test_objectness_carries_no_grad(rng):
    g = random_grid(rng, (3, 10))
    g.cls.requires_grad_(True)
    assert not objectness_mask(g).requires_grad


@pytest.mark.parametrize("a, b, expected", [
    (1, 1, (1, 0, 0)), (1, 0, (0, 1, 0)), (0, 1, (0, 0, 1)), (0, 0, (0, 0, 0)),
])
def test_type_truth_table(a, b, expected):
    m = type_masks(torch.tensor([bool(a)]), torch.tensor([bool(b)]))
    assert (int(m.type1[0]), int(m.type2_a[0]), int(m.type2_b[0])) == expected


def test_partition_on_random_grids(rng):
    for _ in range(1000):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 30)))
        ma = objectness_mask(random_grid(rng, shape))
        mb = objectness_mask(random_grid(rng, shape))
        m = type_masks(ma, mb)
        total = m.type1.int() + m.type2_a.int() + m.type2_b.int()
        assert torch.all(total <= 1)
        assert torch.equal(total == 0, ~ma & ~mb)


def test_swap_symmetry(rng):
    ma = torch.as_tensor(rng.uniform(size=(4, 50)) < 0.4)
    mb = torch.as_tensor(rng.uniform(size=(4, 50)) < 0.4)
    m, s = type_masks(ma, mb), type_masks(mb, ma)
    assert torch.equal(m.type1, s.type1)
    assert torch.equal(m.type2_a, s.type2_b) and torch.equal(m.type2_b, s.type2_a)


def test_length_mismatch():
    with pytest.raises(ValueError):
        type_masks(torch.zeros(3, dtype=torch.bool), torch.zeros(4, dtype=torch.bool))


def test_restrict_and_counts():
    ma = torch.tensor([[True, True], [True, False]])
    mb = torch.tensor([[True, False], [False, True]])
    m = type_masks(ma, mb)
    assert m.counts() == (1, 2, 1)
    assert m.restrict(torch.tensor([False, True])).counts() == (0, 1, 1)
