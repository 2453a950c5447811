import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmheight import _kernels
from ssmheight.ssm import (
    SSMParams, SelectiveSSM, bench_csv, bench_scan, brute_force_scan_oracle, discretize_zoh, loglog_slope,
    scan_sequence, selective_scan,
)
from ssmheight.tensor import Tensor, check_gradients, ops


def _params(rng, L, D, N):
    return SSMParams(
        a_diag=-rng.uniform(0.1, 2.0, (D, N)), b=rng.standard_normal((L, N)), c=rng.standard_normal((L, N)),
        d=rng.standard_normal(D), delta=rng.uniform(0.05, 1.0, (L, D)),
    )


def test_discretize_examples():
    a_bar, _ = discretize_zoh(np.zeros(3), np.ones(3), 0.3)
    assert np.array_equal(a_bar, np.ones(3))
    a_bar, _ = discretize_zoh(np.array([-1.0]), np.ones(1), math.log(2))
    assert abs(a_bar[0] - 0.5) < 1e-15
    _, b_bar = discretize_zoh(np.zeros(1), np.array([2.0]), 0.25)
    assert np.array_equal(b_bar, [0.5])
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            discretize_zoh(np.zeros(1), np.ones(1), bad)


def test_params_reject_nonpositive_delta():
    with pytest.raises(ValueError):
        SSMParams(np.zeros((1, 1)), np.ones((2, 1)), np.ones((2, 1)), np.zeros(1), np.array([[0.1], [0.0]]))


def test_pure_skip_path(rng):
    x = rng.standard_normal((7, 3))
    p = _params(rng, 7, 3, 4)
    p.c[:] = 0
    p.d[:] = 1
    assert np.allclose(scan_sequence(x, p), x, atol=1e-15)


def test_hand_unrolled_recurrence():
    # A_bar = exp(-ln2 * 1) = 0.5, B_bar = 1 * 1
    p = SSMParams(a_diag=np.array([[-math.log(2)]]), b=np.ones((3, 1)), c=np.ones((3, 1)),
                  d=np.zeros(1), delta=np.ones((3, 1)))
    assert np.allclose(scan_sequence(np.array([1.0, 0, 0]), p).ravel(), [1, 0.5, 0.25], atol=1e-15)


def test_oracle_single_step_and_memoryless(rng):
    p = _params(rng, 1, 2, 3)
    x = rng.standard_normal((1, 2))
    b_bar = p.delta[0][:, None] * p.b[0][None]
    expect = (b_bar * p.c[0][None]).sum(1) * x[0] + p.d * x[0]
    assert np.allclose(brute_force_scan_oracle(x, p)[0], expect, atol=1e-14)
    # A_bar -> 0 via a very negative diagonal: each step forgets the past
    p = _params(rng, 5, 2, 3)
    p.a_diag[:] = -1e6
    x = rng.standard_normal((5, 2))
    b_bar = p.delta[:, :, None] * p.b[:, None, :]
    expect = (b_bar * p.c[:, None, :]).sum(2) * x + p.d * x
    assert np.allclose(brute_force_scan_oracle(x, p), expect, atol=1e-12)
    assert np.allclose(scan_sequence(x, p), expect, atol=1e-12)


def test_oracle_hand_checked_l2():
    p = SSMParams(a_diag=np.array([[-1.0]]), b=np.array([[1.0], [2.0]]), c=np.array([[3.0], [0.5]]),
                  d=np.array([0.0]), delta=np.array([[0.5], [0.25]]))
    x = np.array([1.0, -1.0])
    h1 = 0.5 * 1.0
    h2 = math.exp(-0.25) * h1 + 0.25 * 2.0 * -1.0
    assert np.allclose(brute_force_scan_oracle(x, p).ravel(), [3 * h1, 0.5 * h2], atol=1e-15)


def test_scan_matches_oracle_200_draws():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        L = int(rng.integers(1, 65))
        D, N = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        p = _params(rng, L, D, N)
        x = rng.standard_normal((L, D))
        worst = max(worst, np.abs(scan_sequence(x, p) - brute_force_scan_oracle(x, p)).max())
    assert worst < 1e-10


@pytest.mark.skipif(_kernels.compiled_backend is None, reason="compiled kernel not built")
def test_backends_agree(rng):
    B, K, D, N, L = 2, 4, 3, 5, 33
    args = [rng.standard_normal((B, K, D, L)), rng.uniform(0.01, 1, (B, K, D, L)), -rng.uniform(0.1, 2, (K, D, N)),
            rng.standard_normal((B, K, N, L)), rng.standard_normal((B, K, N, L)), rng.standard_normal((K, D))]
    y1, h1 = _kernels.python_backend.scan_forward(*args)
    y2, h2 = _kernels.compiled_backend.scan_forward(*args)
    assert np.allclose(y1, y2, atol=1e-12)
    g = rng.standard_normal(y1.shape)
    for a, b in zip(_kernels.python_backend.scan_backward(g, *args, h1),
                    _kernels.compiled_backend.scan_backward(g, *args, h2)):
        assert np.allclose(a, b, atol=1e-10)


def test_scan_gradients_all_inputs(rng):
    B, K, D, N, L = 1, 2, 2, 3, 6
    arrays = [rng.standard_normal((B, K, D, L)), rng.uniform(0.1, 1, (B, K, D, L)), -rng.uniform(0.1, 2, (K, D, N)),
              rng.standard_normal((B, K, N, L)), rng.standard_normal((B, K, N, L)), rng.standard_normal((K, D))]
    w = rng.standard_normal((B, K, D, L))
    err = check_gradients(lambda *t: ops.sum(ops.mul(selective_scan(*t), w)), arrays)
    assert err < 1e-4


def test_scan_rejects_nonfinite_and_bad_shapes(rng):
    B, K, D, N, L = 1, 1, 2, 2, 3
    u = rng.standard_normal((B, K, D, L))
    args = [np.ones((B, K, D, L)), -np.ones((K, D, N)), np.ones((B, K, N, L)), np.ones((B, K, N, L)), np.ones((K, D))]
    u[0, 0, 1, 2] = np.nan
    with pytest.raises(ValueError):
        selective_scan(u, *args)
    with pytest.raises(ValueError):
        selective_scan(np.ones((B, K, D, L)), np.ones((B, K, D, L)), -np.ones((K, D, N + 1)), *args[2:])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_contractive_state_bound(L, seed):
    rng = np.random.default_rng(seed)
    p = _params(rng, L, 1, 3)
    x = rng.standard_normal((L, 1))
    a_bar, b_bar = discretize_zoh(p.a_diag[None], p.b[:, None, :], p.delta[:, :, None])
    assert np.all(np.abs(a_bar) <= 1)
    h = np.zeros(3)
    bound = 0.0
    for t in range(L):
        h = a_bar[t, 0] * h + b_bar[t, 0] * x[t, 0]
        bound += np.abs(b_bar[t, 0] * x[t, 0]).sum()
        assert np.abs(h).sum() <= bound + 1e-12


def test_selective_module_init_and_shape(rng):
    m = SelectiveSSM(channels=4, groups=2, rng=rng, state=5)
    assert np.allclose(-np.exp(m.a_log.data[0, 0]), -np.arange(1, 6))
    y = m(Tensor(rng.standard_normal((3, 2, 4, 9))))
    assert y.shape == (3, 2, 4, 9) and np.all(np.isfinite(y.data))


def test_bench_l1_and_csv():
    rows = bench_scan([1, 2], repeats=1)
    assert all(r[1] > 0 and r[2] > 0 and math.isfinite(r[1]) for r in rows)
    assert bench_csv(rows).splitlines()[0] == "L,scan_us,attention_us"


def test_loglog_slope_exact():
    Ls = [1, 2, 4, 8]
    assert abs(loglog_slope(Ls, [3 * L ** 1.5 for L in Ls]) - 1.5) < 1e-12
