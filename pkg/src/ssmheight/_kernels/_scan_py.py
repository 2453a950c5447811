"""Pure-numpy selective-scan kernels with the same contract as ``_scan.pyx``.

The time loop stays in Python; every other axis is vectorised.
"""

from __future__ import annotations

import numpy as np


def scan_forward(u, delta, a, bmat, cmat, dskip, store_states=True):
    B, K, D, L = u.shape
    N = a.shape[2]
    h = np.zeros((B, K, D, N))
    y = np.empty((B, K, D, L))
    hs = np.empty((B, K, D, L, N)) if store_states else None
    for t in range(L):
        dt = delta[:, :, :, t, None]
        h = np.exp(dt * a) * h + (dt * u[:, :, :, t, None]) * bmat[:, :, None, :, t]
        y[:, :, :, t] = np.einsum("bkdn,bkn->bkd", h, cmat[:, :, :, t])
        if store_states:
            hs[:, :, :, t] = h
    y += dskip[None, :, :, None] * u
    return y, hs


def scan_backward(gy, u, delta, a, bmat, cmat, dskip, hs):
    B, K, D, L = u.shape
    N = a.shape[2]
    gu = np.empty((B, K, D, L))
    gdelta = np.empty((B, K, D, L))
    ga = np.zeros((K, D, N))
    gb = np.empty((B, K, N, L))
    gc = np.empty((B, K, N, L))
    gd = (gy * u).sum(axis=(0, 3))
    gh = np.zeros((B, K, D, N))
    da_next = np.zeros((B, K, D, N))
    zeros = np.zeros((B, K, D, N))
    for t in range(L - 1, -1, -1):
        gyt = gy[:, :, :, t, None]
        dt = delta[:, :, :, t, None]
        ut = u[:, :, :, t, None]
        bt = bmat[:, :, None, :, t]
        gh = gh * da_next + gyt * cmat[:, :, None, :, t]
        gc[:, :, :, t] = np.einsum("bkd,bkdn->bkn", gy[:, :, :, t], hs[:, :, :, t])
        da = np.exp(dt * a)
        hprev = hs[:, :, :, t - 1] if t > 0 else zeros
        gda = gh * hprev * da
        gdelta[:, :, :, t] = (gda * a).sum(-1) + (gh * bt).sum(-1) * ut[..., 0]
        ga += (gda * dt).sum(axis=0)
        gb[:, :, :, t] = (gh * (dt * ut)).sum(axis=2)
        gu[:, :, :, t] = (gh * bt).sum(-1) * dt[..., 0] + gyt[..., 0] * dskip
        da_next = da
    return gu, gdelta, ga, gb, gc, gd
