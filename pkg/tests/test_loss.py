import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rand
from mist.autodiff import ShapeError, Tensor, grad_check
from mist.loss import LossConfig, ce_loss, dice_loss, enumerate_subsets, map_loss, subset_masks, total_loss


def _np_softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _oracle_map_loss(logits, target, gamma, smooth=1.0):
    N, K = logits.shape[:2]
    p = _np_softmax(logits)
    onehot = np.stack([target == c for c in range(K)], axis=1).astype(float)
    inter = (p * onehot).sum(axis=(2, 3))
    dice = 1 - (2 * inter + smooth) / (p.sum(axis=(2, 3)) + onehot.sum(axis=(2, 3)) + smooth)
    logp = np.log(p)
    ce = -(logp * onehot).sum(axis=1).mean()
    return gamma * dice.mean() + (1 - gamma) * ce


def _oracle_total(maps, target, gamma=0.3):
    """Loop over itertools combinations; independent of the bitmask enumeration."""
    total = 0.0
    for r in range(1, len(maps) + 1):
        for combo in itertools.combinations(maps, r):
            total += _oracle_map_loss(sum(combo), target, gamma)
    return total


def _case(n=3, K=3, seed=0):
    maps = [rand(2, K, 6, 6, seed=seed + i) for i in range(n)]
    target = np.random.default_rng(seed + 100).integers(0, K, size=(2, 6, 6))
    return maps, target


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_subset_count(n):
    maps = [Tensor(rand(1, 2, 2, 2, seed=i)) for i in range(n)]
    assert len(enumerate_subsets(maps)) == 2**n - 1 == len(subset_masks(n))


def test_subset_edge_cases():
    m = Tensor(rand(1, 2, 3, 3))
    assert enumerate_subsets([m])[0] is m
    maps = [Tensor(rand(1, 2, 3, 3, seed=i)) for i in range(3)]
    full = enumerate_subsets(maps)[-1]
    assert np.array_equal(full.data, maps[0].data + maps[1].data + maps[2].data)
    with pytest.raises(ShapeError):
        enumerate_subsets([])
    with pytest.raises(ShapeError):
        enumerate_subsets([m, Tensor(rand(1, 2, 2, 2))])


def test_total_loss_matches_brute_force_oracle():
    maps, target = _case()
    out = total_loss([Tensor(m) for m in maps], target).item()
    assert abs(out - _oracle_total(maps, target)) < 1e-12


def test_single_map_is_weighted_sum():
    maps, target = _case(n=1)
    t = Tensor(maps[0])
    expected = 0.3 * dice_loss(t, target).item() + 0.7 * ce_loss(t, target).item()
    assert total_loss([t], target, LossConfig(n_maps=1)).item() == expected


def test_gamma_zero_is_pure_cross_entropy_sum():
    maps, target = _case()
    ts = [Tensor(m) for m in maps]
    expected = sum(ce_loss(s, target).item() for s in enumerate_subsets(ts))
    assert abs(total_loss(ts, target, LossConfig(gamma=0.0)).item() - expected) < 1e-12


def test_mean_reduction_divides_by_subset_count():
    maps, target = _case()
    ts = [Tensor(m) for m in maps]
    s = total_loss(ts, target).item()
    m = total_loss(ts, target, LossConfig(reduction="mean")).item()
    assert abs(m - s / 7) < 1e-12


def test_permuting_maps_leaves_total_unchanged():
    maps, target = _case()
    a = total_loss([Tensor(m) for m in maps], target).item()
    b = total_loss([Tensor(m) for m in maps[::-1]], target).item()
    assert abs(a - b) < 1e-12


def test_dice_loss_examples():
    target = np.zeros((1, 4, 4), dtype=int)
    target[0, :2] = 1
    logits = np.where(np.stack([target == 0, target == 1], axis=1), 20.0, -20.0)
    assert dice_loss(Tensor(logits), target).item() < 1e-3
    N = 16
    expected = 1 - (N / 2 + 1) / (N + 1)  # p = 1/2 everywhere, n_c = N/2 for both classes
    assert abs(dice_loss(Tensor(np.zeros((1, 2, 4, 4))), target).item() - expected) < 1e-15


def test_ce_examples():
    target = np.random.default_rng(0).integers(0, 5, size=(2, 3, 3))
    assert abs(ce_loss(Tensor(np.zeros((2, 5, 3, 3))), target).item() - math.log(5)) < 1e-15
    logits = np.moveaxis(np.eye(5)[target], -1, 1) * 20.0
    assert ce_loss(Tensor(logits), target).item() < 1e-8


def test_out_of_range_class_rejected():
    with pytest.raises(ValueError):
        dice_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), -1))
    with pytest.raises(ShapeError):
        ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 3), dtype=int))


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(gamma=1.5)
    with pytest.raises(ValueError):
        LossConfig(reduction="max")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 30.0), st.integers(2, 4))
def test_losses_are_bounded(seed, scale, K):
    logits = rand(1, K, 4, 4, seed=seed, scale=scale)
    target = np.random.default_rng(seed).integers(0, K, size=(1, 4, 4))
    d = dice_loss(Tensor(logits), target).item()
    assert 0.0 <= d <= 1.0
    assert total_loss([Tensor(logits)] * 3, target).item() >= 0.0


def test_total_loss_gradient_wrt_every_map():
    maps, target = _case(K=2)
    ts = [Tensor(m) for m in maps]
    err = grad_check(lambda x: total_loss([x, ts[1], ts[2]], target), ts[0], wrt=ts[1:])
    assert err < 1e-6


def test_map_loss_gradient():
    maps, target = _case(n=1, K=4)
    assert grad_check(lambda x: map_loss(x, target, LossConfig()), Tensor(maps[0])) < 1e-6
