import numpy as np
from hypothesis import given, settings, strategies as st

from ssmheight.gradsuite import module_directional
from ssmheight.mam import MAM, mam_forward
from ssmheight.tensor import Tensor, check_gradients, ops


def test_alpha_zero_identity(rng):
    m = MAM(3, rng)
    assert m.alpha.data == 0
    x = rng.standard_normal((2, 3, 4, 5))
    assert np.array_equal(mam_forward(x, m).data, x)


def test_constant_input_closed_form(rng):
    m = MAM(2, rng)
    m.alpha.data[...] = 0.7
    x = np.full((1, 2, 3, 4), 2.0)
    attn = m.attention(Tensor(x)).data
    assert np.allclose(attn, 1 / 12, atol=1e-15)
    assert np.allclose(m(Tensor(x)).data, 0.7 / 12 * x + x, atol=1e-14)


def test_gradients_fd(rng):
    m = MAM(2, rng)
    m.alpha.data[...] = 0.8
    x = rng.standard_normal((1, 2, 3, 3))
    w = rng.standard_normal((1, 2, 3, 3))
    assert check_gradients(lambda t: ops.sum(ops.mul(m(t), w)), [x]) < 1e-4
    assert module_directional(m, m, x, rng) < 1e-4
    m.zero_grad()
    ops.sum(ops.mul(m(Tensor(x)), w)).backward()
    assert all(p.grad is not None for p in (m.w_h, m.w_w, m.alpha))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_attention_is_distribution(h, w, seed):
    rng = np.random.default_rng(seed)
    m = MAM(3, rng)
    x = Tensor(rng.standard_normal((2, 3, h, w)) * 3)
    a = m.attention(x).data
    assert a.shape == (2, 1, h, w)
    assert np.allclose(a.reshape(2, -1).sum(1), 1.0)
    # strictly inside (0,1) needs more than one position
    if h * w > 1:
        assert np.all((a > 0) & (a < 1))
    m.alpha.data[...] = 0.5
    assert m(x).shape == x.shape


def test_logit_shift_invariance(rng):
    m = MAM(3, rng)
    m.alpha.data[...] = 1.3
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    assert np.allclose(m(x).data, m(x, logit_shift=11.0).data, atol=1e-13)
