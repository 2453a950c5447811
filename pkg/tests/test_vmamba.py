import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmheight.gradsuite import _randomize, module_directional
from ssmheight.tensor import ShapeError, Tensor, check_gradients, no_grad, ops
from ssmheight.vmamba import (
    SS2D, Backbone, BlockConfig, ScanDirection, VMambaBlock, backbone_forward, cross_merge, cross_scan,
    scan_orders, vmamba_block,
)


def test_cross_scan_2x2_enumeration():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    seqs = cross_scan(np.array([[a, b], [c, d]]).reshape(1, 1, 2, 2)).data[0, :, 0]
    assert list(seqs[ScanDirection.ROW_MAJOR]) == [a, b, c, d]
    assert list(seqs[ScanDirection.ROW_MAJOR_REVERSED]) == [d, c, b, a]
    assert list(seqs[ScanDirection.COL_MAJOR]) == [a, c, b, d]
    assert list(seqs[ScanDirection.COL_MAJOR_REVERSED]) == [d, b, c, a]


def test_cross_scan_1x1():
    assert np.all(cross_scan(np.full((1, 1, 1, 1), 5.0)).data == 5.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 1000))
def test_merge_of_scan_is_four_x(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, 3, h, w))
    assert np.array_equal(cross_merge(cross_scan(x), h, w).data, 4 * x)
    orders, inverses = scan_orders(h, w)
    for k in range(4):
        assert sorted(orders[k]) == list(range(h * w))
        assert np.array_equal(orders[k][inverses[k]], np.arange(h * w))


def test_cross_merge_examples(rng):
    assert np.all(cross_merge(np.zeros((1, 4, 2, 6)), 2, 3).data == 0)
    assert np.all(cross_merge(np.full((1, 4, 2, 6), 1.5), 2, 3).data == 6.0)
    y = rng.standard_normal((2, 4, 3, 12))
    # scatter-then-sum oracle with explicit coordinates
    expect = np.zeros((2, 3, 3, 4))
    coords = [[(i, j) for i in range(3) for j in range(4)], None, [(i, j) for j in range(4) for i in range(3)], None]
    coords[1], coords[3] = coords[0][::-1], coords[2][::-1]
    for k in range(4):
        for t, (i, j) in enumerate(coords[k]):
            expect[:, :, i, j] += y[:, k, :, t]
    assert np.allclose(cross_merge(y, 3, 4).data, expect, atol=1e-14)
    with pytest.raises(ShapeError):
        cross_merge(np.zeros((1, 4, 2, 5)), 2, 3)


def test_ss2d_shape_and_zero_projection(rng):
    m = SS2D(8, rng)
    x = rng.standard_normal((2, 8, 8, 8))
    assert m(Tensor(x)).shape == (2, 8, 8, 8)
    for p in (m.in_proj, m.out_proj):
        p.zero_()
    assert np.all(m(Tensor(x)).data == 0)


def test_ss2d_input_gradient(rng):
    m = SS2D(2, rng, state=3)
    _randomize(m, rng)
    x = rng.standard_normal((1, 2, 3, 3))
    w = rng.standard_normal((1, 2, 3, 3))
    assert check_gradients(lambda t: ops.sum(ops.mul(m(t), w)), [x]) < 1e-4
    assert module_directional(m, m, x, rng) < 1e-4


def test_block_identity_cases(rng):
    blk = VMambaBlock(4, rng, drop_path=0.3, drop_rng=np.random.default_rng(1))
    x = rng.standard_normal((2, 4, 4, 4))
    blk.zero_init_outputs()
    assert np.array_equal(vmamba_block(Tensor(x), blk, drop_path_active=True).data, x)
    blk2 = VMambaBlock(4, rng, drop_path=0.3, drop_rng=np.random.default_rng(1))
    blk2.drop1.force_drop = blk2.drop2.force_drop = True
    assert np.array_equal(blk2(Tensor(x)).data, x)


def test_block_eval_deterministic_and_shape(rng):
    blk = VMambaBlock(4, rng, drop_path=0.5, drop_rng=np.random.default_rng(2)).eval()
    x = Tensor(rng.standard_normal((2, 4, 5, 3)))
    a, b = blk(x).data, blk(x).data
    assert a.shape == (2, 4, 5, 3) and np.array_equal(a, b)


def test_drop_path_uses_seeded_stream(rng):
    x = rng.standard_normal((6, 4, 4, 4))
    outs = []
    for _ in range(2):
        blk = VMambaBlock(4, np.random.default_rng(0), drop_path=0.5, drop_rng=np.random.default_rng(9))
        outs.append(vmamba_block(Tensor(x), blk, drop_path_active=True).data)
    assert np.array_equal(outs[0], outs[1])


def test_block_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(channels=[16, 16, 32, 64])
    with pytest.raises(ValueError):
        BlockConfig(drop_path=1.0)


def test_backbone_extents(rng):
    bb = Backbone(BlockConfig(), rng, np.random.default_rng(0)).eval()
    with no_grad():
        feats = backbone_forward(rng.standard_normal((1, 3, 64, 64)), bb)
    assert [f.shape for f in feats] == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4), (1, 128, 2, 2)]
    with pytest.raises(ShapeError, match="32"):
        backbone_forward(np.zeros((1, 3, 48, 40)), bb)


def _small_backbone(rng):
    return Backbone(BlockConfig(channels=[4, 6, 8, 10], depths=[1, 1, 1, 1], patch_size=2), rng,
                    np.random.default_rng(0))


def test_backbone_batch_independence(rng):
    bb = _small_backbone(rng).eval()
    x = rng.standard_normal((2, 3, 16, 16))
    with no_grad():
        both = bb(Tensor(x))
        singles = [bb(Tensor(x[i:i + 1])) for i in range(2)]
    for lvl in range(4):
        stacked = np.concatenate([s[lvl].data for s in singles])
        assert np.allclose(both[lvl].data, stacked, atol=1e-12)


def test_backbone_zero_image_zero_biases(rng):
    bb = _small_backbone(rng).eval()
    for name, p in bb.named_parameters():
        if name.endswith("bias"):
            p.data[:] = 0
    with no_grad():
        feats = bb(Tensor(np.zeros((1, 3, 16, 16))))
    assert all(np.all(f.data == 0) for f in feats)


def test_backbone_gradient_fd():
    rng = np.random.default_rng(3)
    bb = _small_backbone(rng).eval()
    _randomize(bb, rng)
    x = rng.standard_normal((1, 3, 16, 16))

    def fwd(t):
        return ops.concat([ops.reshape(f, (-1,)) for f in bb(t)], axis=0)

    assert module_directional(fwd, bb, x, rng) < 1e-3
