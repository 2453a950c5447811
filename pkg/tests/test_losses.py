import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmheight.losses import (
    LossConfig, edge_map, loss_breakdown, loss_ce, loss_dice, loss_edge, loss_huber, loss_seg, loss_total,
)
from ssmheight.tensor import Tensor, check_gradients

EPS = 1e-7


def _hand_laplacian(m):
    H, W = m.shape
    out = np.zeros_like(m)
    for i in range(H):
        for j in range(W):
            acc = -4 * m[i, j]
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                if 0 <= i + di < H and 0 <= j + dj < W:
                    acc += m[i + di, j + dj]
            out[i, j] = acc
    return out


def _hand_bce(t, p):
    total = 0.0
    for tv, pv in zip(t.ravel(), p.ravel()):
        pv = min(max(pv, EPS), 1 - EPS)
        total -= tv * math.log(pv) + (1 - tv) * math.log(1 - pv)
    return total / t.size


def test_ce_examples():
    s = np.ones((1, 1, 4, 4))
    assert loss_ce(s, np.full(s.shape, 1 - EPS)).item() < 1e-6
    assert abs(loss_ce((np.arange(16) % 2).reshape(1, 1, 4, 4).astype(float), np.full(s.shape, 0.5)).item()
               - math.log(2)) < 1e-12


def test_dice_examples(rng):
    m = np.zeros((1, 1, 4, 4))
    m[0, 0, :2] = 1
    assert abs(loss_dice(m, m).item()) < 1e-9
    # eps in numerator and denominator: 1 - eps/(16 + eps)
    assert abs(loss_dice(m, 1 - m).item() - (1 - EPS / (16 + EPS))) < 1e-15
    assert loss_dice(np.zeros_like(m), np.zeros_like(m)).item() == 0.0
    p = rng.uniform(size=m.shape)
    perm = rng.permutation(16)
    a = loss_dice(m, p).item()
    b = loss_dice(m.ravel()[perm].reshape(m.shape), p.ravel()[perm].reshape(m.shape)).item()
    assert abs(a - b) < 1e-14 and 0 <= a <= 1


def test_edge_constant_masks():
    ones = np.ones((1, 1, 6, 6))
    # interior Laplacian is zero; the zero-padded border is an edge in both maps
    assert np.all(edge_map(ones).data[0, 0, 1:-1, 1:-1] == 0)
    matched = loss_edge(ones, ones).item()
    assert matched < 1e-5
    z = np.zeros((1, 1, 6, 6))
    assert loss_edge(z, z).item() < 1e-6


def test_edge_single_pixel_hand_checked():
    gt = np.zeros((5, 5))
    gt[2, 2] = 1
    pred = np.full((5, 5), 0.5)
    l_gt = np.clip(np.abs(_hand_laplacian(gt)), 0, 1)
    l_pr = np.clip(np.abs(_hand_laplacian(pred)), 0, 1)
    assert l_gt.sum() == 5 and l_gt[2, 2] == 1 and l_gt[1, 2] == 1
    assert np.array_equal(edge_map(gt[None, None]).data[0, 0], l_gt)
    expect = _hand_bce(l_gt, l_pr)
    assert abs(loss_edge(gt[None, None], pred[None, None]).item() - expect) < 1e-12


def test_edge_identical_masks_is_entropy(rng):
    m = (rng.uniform(size=(1, 1, 6, 6)) > 0.5).astype(float)
    l = np.clip(np.abs(_hand_laplacian(m[0, 0])), 0, 1)
    # matched targets: the loss equals the clamped binary entropy of the edge map
    assert abs(loss_edge(m, m).item() - _hand_bce(l, l)) < 1e-12


def test_seg_recomposition(rng):
    s = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(float)
    p = rng.uniform(0.05, 0.95, s.shape)
    hand = loss_ce(s, p).item() + loss_dice(s, p).item() + 10 * loss_edge(s, p).item()
    assert abs(loss_seg(s, p).item() - hand) < 1e-12
    no_edge = LossConfig(edge_weight=0)
    assert abs(loss_seg(s, p, no_edge).item() - loss_ce(s, p).item() - loss_dice(s, p).item()) < 1e-12


def test_seg_zero_at_perfect():
    # all-zero ground truth predicted at the clamp floor: every child vanishes up to eps
    z = np.zeros((1, 1, 4, 4))
    assert loss_seg(z, z).item() < 1e-5


def test_huber_examples():
    assert loss_huber(np.ones(4), np.ones(4)).item() == 0
    assert abs(loss_huber(np.array([0.0]), np.array([2.0]), delta=1.0).item() - 1.5) < 1e-15
    for d in (0.5, 1.0, 3.0):
        lo = loss_huber(np.array([0.0]), np.array([d * (1 - 1e-12)]), d).item()
        hi = loss_huber(np.array([0.0]), np.array([d]), d).item()
        assert abs(lo - hi) < 1e-9 and abs(hi - 0.5 * d * d) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 5), st.lists(st.floats(-100, 100), min_size=1, max_size=10))
def test_huber_gradient_bounded(delta, errs):
    e = np.array(errs)
    x = Tensor(e, requires_grad=True)
    loss_huber(np.zeros_like(e), x, delta, reduction="sum").backward()
    assert np.all(np.abs(x.grad) <= delta + 1e-12)


def test_total_examples(rng):
    s = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float)
    p = rng.uniform(0.05, 0.95, s.shape)
    h, hp = rng.uniform(0, 9, s.shape), rng.uniform(0, 9, s.shape)
    total = loss_total(s, p, h, hp).item()
    assert abs(total - loss_seg(s, p).item() - loss_huber(h, hp).item()) < 1e-12
    parts = loss_breakdown(s, p, h, hp)
    assert abs(parts["total"].item() - total) < 1e-12
    # linearity of the gradient
    pt = Tensor(p, requires_grad=True)
    loss_total(s, pt, h, hp).backward()
    pt2 = Tensor(p, requires_grad=True)
    loss_seg(s, pt2).backward()
    assert np.allclose(pt.grad, pt2.grad, atol=1e-14)
    assert loss_total(np.zeros_like(s), np.zeros_like(s), h, h).item() < 1e-5


@pytest.mark.parametrize("fn", [loss_ce, loss_dice, loss_edge, loss_seg])
def test_seg_loss_gradients(fn, rng):
    s = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float)
    p = rng.uniform(0.1, 0.9, s.shape)
    # edge branch has |.| kinks; keep the Laplacian of p away from zero and the clamp
    err = check_gradients(lambda t: fn(s, t), [p], eps=1e-6)
    assert err < 1e-4


def test_huber_gradient_fd(rng):
    h = rng.uniform(0, 5, (1, 1, 4, 4))
    hp = h + rng.choice([-1, 1], h.shape) * rng.uniform(0.1, 3, h.shape)
    hp[np.abs(np.abs(hp - h) - 1.0) < 0.05] += 0.2
    assert check_gradients(lambda t: loss_huber(h, t), [hp]) < 1e-4


def test_sum_reduction_scales(rng):
    s = (rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float)
    p = rng.uniform(0.1, 0.9, s.shape)
    cfg = LossConfig(reduction="sum")
    assert abs(loss_ce(s, p, cfg).item() - 16 * loss_ce(s, p).item()) < 1e-10


def test_config_validation():
    for kw in (dict(edge_weight=-1), dict(huber_delta=0), dict(reduction="max")):
        with pytest.raises(ValueError):
            LossConfig(**kw)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    s = (rng.uniform(size=(1, 1, 5, 5)) > 0.5).astype(float)
    p = rng.uniform(0, 1, s.shape)
    for fn in (loss_ce, loss_dice, loss_edge, loss_seg):
        assert fn(s, p).item() >= -1e-12
    assert loss_huber(rng.standard_normal(5), rng.standard_normal(5)).item() >= 0
