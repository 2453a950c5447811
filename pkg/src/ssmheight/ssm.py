"""Selective state-space scan.

Continuous dynamics ``h' = A h + B x``, ``y = C h + D x`` with a diagonal,
non-positive ``A`` are discretised per step as ``A_bar = exp(A * delta)`` and
``B_bar = B * delta`` and unrolled as

    h_t = A_bar_t * h_{t-1} + B_bar_t * x_t,    y_t = C_t . h_t + D * x_t,

with ``h_0 = 0``.  ``B``, ``C`` and ``delta`` are recomputed at every step from
that step's input, which is what makes the scan selective.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .nn import Module, Parameter
from .tensor import Tensor, as_tensor, grad_enabled, no_grad, ops


@dataclass
class SSMParams:
    """Per-step parameters of one single-channel-group scan.

    Shapes: ``a_diag [D, N]``, ``b [L, N]``, ``c [L, N]``, ``d [D]``, ``delta [L, D]``.
    """

    a_diag: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if np.any(self.delta <= 0):
            raise ValueError("delta must be positive at every step")


def discretize_zoh(a_diag, b, delta) -> tuple:
    """Return ``(exp(a_diag * delta), b * delta)``."""
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError(f"delta must be positive, got {delta}")
    return np.exp(np.asarray(a_diag, dtype=np.float64) * delta), np.asarray(b, dtype=np.float64) * delta


def _contig(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def selective_scan(u, delta, a, bmat, cmat, dskip) -> Tensor:
    """Differentiable scan over ``K`` groups of ``D`` independent channels.

    ``u``, ``delta``: ``[B, K, D, L]``; ``a``: ``[K, D, N]``; ``bmat``, ``cmat``:
    ``[B, K, N, L]``; ``dskip``: ``[K, D]``.  Returns ``y`` shaped like ``u``.
    """
    u, delta, a, bmat, cmat, dskip = (as_tensor(t) for t in (u, delta, a, bmat, cmat, dskip))
    Bsz, K, D, L = u.shape
    N = a.shape[-1]
    if L < 1:
        raise ValueError("scan length must be at least 1")
    expected = {
        "delta": (delta.shape, (Bsz, K, D, L)), "a": (a.shape, (K, D, N)),
        "bmat": (bmat.shape, (Bsz, K, N, L)), "cmat": (cmat.shape, (Bsz, K, N, L)),
        "dskip": (dskip.shape, (K, D)),
    }
    for name, (got, want) in expected.items():
        if got != want:
            raise ops.ShapeError(f"{name} has shape {got}, expected {want}")
    if not np.all(np.isfinite(u.data)):
        raise ValueError("selective_scan received non-finite input")
    arrays = [_contig(t.data) for t in (u, delta, a, bmat, cmat, dskip)]
    need_grad = grad_enabled() and any(t.requires_grad for t in (u, delta, a, bmat, cmat, dskip))
    y, states = _kernels.scan_forward(*arrays, store_states=need_grad)

    def backward(g):
        return _kernels.scan_backward(_contig(g), *arrays, states)

    return ops.make_op(y, (u, delta, a, bmat, cmat, dskip), backward, "selective_scan")


def scan_sequence(x, params: SSMParams) -> np.ndarray:
    """Scan one ``[L, D]`` sequence with explicit per-step parameters (no autodiff)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    with no_grad():
        y = selective_scan(
            x.T[None, None], params.delta.T[None, None], params.a_diag[None],
            params.b.T[None, None], params.c.T[None, None], np.atleast_1d(params.d)[None],
        )
    return y.data[0, 0].T


def brute_force_scan_oracle(x, params: SSMParams) -> np.ndarray:
    """O(L^2) closed form ``h_t = sum_{k<=t} (prod_{k<j<=t} A_bar_j) B_bar_k x_k``.

    No recurrence is run; every hidden state is rebuilt from scratch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    L, D = x.shape
    if L > 64:
        raise ValueError("oracle is test-only; keep L <= 64")
    a_bar = np.exp(params.delta[:, :, None] * params.a_diag[None])      # [L, D, N]
    b_bar = params.delta[:, :, None] * params.b[:, None, :]             # [L, D, N]
    y = np.empty((L, D))
    for t in range(L):
        h = np.zeros_like(a_bar[0])
        for k in range(t + 1):
            decay = np.prod(a_bar[k + 1:t + 1], axis=0) if k < t else np.ones_like(h)
            h = h + decay * b_bar[k] * x[k][:, None]
        y[t] = (h * params.c[t][None, :]).sum(axis=1) + np.atleast_1d(params.d) * x[t]
    return y


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(Module):
    """Input-dependent ``B``, ``C``, ``delta`` for ``K`` groups of ``D`` channels.

    ``delta = softplus(W_dt u + b_dt)``, ``B = W_B u``, ``C = W_C u``; ``A`` is kept
    as ``-exp(a_log)`` so it stays strictly negative, initialised to ``-(1..N)``.
    """

    def __init__(self, channels: int, groups: int, rng: np.random.Generator, state: int = 8,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        D, K, N = channels, groups, state
        bound = 1.0 / math.sqrt(D)
        self.w_dt = Parameter(rng.uniform(-bound, bound, (K, D, D)) * 0.1)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), (K, D)))
        self.b_dt = Parameter(_inverse_softplus(dt))
        self.w_b = Parameter(rng.uniform(-bound, bound, (K, N, D)))
        self.w_c = Parameter(rng.uniform(-bound, bound, (K, N, D)))
        self.a_log = Parameter(np.log(np.broadcast_to(np.arange(1, N + 1, dtype=np.float64), (K, D, N)).copy()))
        self.d = Parameter(np.ones((K, D)))

    def forward(self, u: Tensor) -> Tensor:
        """``u``: ``[B, K, D, L]`` -> ``[B, K, D, L]``."""
        delta = ops.softplus(ops.add(ops.matmul(self.w_dt, u), ops.reshape(self.b_dt, self.b_dt.shape + (1,))))
        bmat = ops.matmul(self.w_b, u)
        cmat = ops.matmul(self.w_c, u)
        a = ops.neg(ops.exp(self.a_log))
        return selective_scan(u, delta, a, bmat, cmat, self.d)


# -- benchmarking --------------------------------------------------------------

def attention_reference(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> np.ndarray:
    """Dense single-head self-attention over ``x [L, D]``; materialises the ``L x L`` map."""
    q, k, v = x @ wq, x @ wk, x @ wv
    logits = (q @ k.T) / math.sqrt(x.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def _best_mean(fn, repeats: int) -> float:
    fn()  # warm-up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    samples.sort()
    # trimmed mean: drop the slowest third to damp scheduler noise
    keep = samples[: max(1, len(samples) - len(samples) // 3)]
    return float(np.mean(keep))


def bench_scan(lengths: Sequence[int], repeats: int = 5, width: int = 16, state: int = 8,
               seed: int = 0, backend=None) -> list:
    """Wall time (microseconds) of the scan and of dense attention at each length."""
    lengths = [int(v) for v in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly ascending")
    kern = backend or _kernels.active
    rng = np.random.default_rng(seed)
    wq, wk, wv = (rng.standard_normal((width, width)) / math.sqrt(width) for _ in range(3))
    a = -np.broadcast_to(np.arange(1, state + 1, dtype=np.float64), (1, width, state)).copy()
    dskip = np.ones((1, width))
    rows = []
    for L in lengths:
        u = rng.standard_normal((1, 1, width, L))
        delta = rng.uniform(0.01, 0.1, (1, 1, width, L))
        bm = rng.standard_normal((1, 1, state, L))
        cm = rng.standard_normal((1, 1, state, L))
        x = np.ascontiguousarray(u[0, 0].T)
        scan_s = _best_mean(lambda: kern.scan_forward(u, delta, a, bm, cm, dskip, store_states=False), repeats)
        attn_s = _best_mean(lambda: attention_reference(x, wq, wk, wv), repeats)
        rows.append((L, scan_s * 1e6, attn_s * 1e6))
    return rows


def bench_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["L", "scan_us", "attention_us"])
    for L, s, a in rows:
        writer.writerow([L, f"{s:.3f}", f"{a:.3f}"])
    return buf.getvalue()


def loglog_slope(lengths, times) -> float:
    """Least-squares slope of ``log(time)`` against ``log(L)``."""
    return float(np.polyfit(np.log(np.asarray(lengths, float)), np.log(np.asarray(times, float)), 1)[0])
