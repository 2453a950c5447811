# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan kernels.

Array layout: ``u``, ``delta`` are ``[B, K, D, L]``; ``bmat``, ``cmat`` are
``[B, K, N, L]``; ``a`` is ``[K, D, N]``; ``dskip`` is ``[K, D]``.  ``K`` indexes
independent scan groups (the four cross-scan directions), ``D`` channels and
``N`` the diagonal state.  Internally ``B``/``C`` are transposed to
``[B, K, L, N]`` so the inner state loop walks contiguous memory.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.stdlib cimport malloc, free

cnp.import_array()


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def scan_forward(u, delta, a, bmat, cmat, dskip, bint store_states=True):
    u, delta, a, dskip = _f64(u), _f64(delta), _f64(a), _f64(dskip)
    bt = _f64(np.swapaxes(bmat, 2, 3))
    ct = _f64(np.swapaxes(cmat, 2, 3))
    cdef Py_ssize_t B = u.shape[0], K = u.shape[1], D = u.shape[2], L = u.shape[3]
    cdef Py_ssize_t N = a.shape[2]
    y = np.empty((B, K, D, L))
    hs = np.empty((B, K, D, L, N)) if store_states else np.empty((1, 1, 1, 1, N))
    _forward(<double*>cnp.PyArray_DATA(u), <double*>cnp.PyArray_DATA(delta), <double*>cnp.PyArray_DATA(a),
             <double*>cnp.PyArray_DATA(bt), <double*>cnp.PyArray_DATA(ct), <double*>cnp.PyArray_DATA(dskip),
             <double*>cnp.PyArray_DATA(y), <double*>cnp.PyArray_DATA(hs), store_states, B, K, D, L, N)
    return y, (hs if store_states else None)


cdef void _forward(double* u, double* delta, double* a, double* bt, double* ct, double* dskip,
                   double* y, double* hs, bint store, Py_ssize_t B, Py_ssize_t K, Py_ssize_t D,
                   Py_ssize_t L, Py_ssize_t N) nogil:
    cdef Py_ssize_t b, k, d, t, n, seq, bk
    cdef double ut, dt, acc, hn, ds
    cdef double* h = <double*>malloc(N * sizeof(double))
    cdef double *arow, *brow, *crow, *hout
    for b in range(B):
        for k in range(K):
            bk = b * K + k
            for d in range(D):
                seq = (bk * D + d) * L
                arow = a + (k * D + d) * N
                ds = dskip[k * D + d]
                for n in range(N):
                    h[n] = 0.0
                for t in range(L):
                    ut = u[seq + t]
                    dt = delta[seq + t]
                    brow = bt + (bk * L + t) * N
                    crow = ct + (bk * L + t) * N
                    acc = 0.0
                    for n in range(N):
                        hn = exp(dt * arow[n]) * h[n] + dt * brow[n] * ut
                        h[n] = hn
                        acc = acc + crow[n] * hn
                    y[seq + t] = acc + ds * ut
                    if store:
                        hout = hs + (seq + t) * N
                        for n in range(N):
                            hout[n] = h[n]
    free(h)


def scan_backward(gy, u, delta, a, bmat, cmat, dskip, hs):
    gy, u, delta, a, dskip, hs = _f64(gy), _f64(u), _f64(delta), _f64(a), _f64(dskip), _f64(hs)
    bt = _f64(np.swapaxes(bmat, 2, 3))
    ct = _f64(np.swapaxes(cmat, 2, 3))
    cdef Py_ssize_t B = u.shape[0], K = u.shape[1], D = u.shape[2], L = u.shape[3]
    cdef Py_ssize_t N = a.shape[2]
    gu = np.empty((B, K, D, L))
    gdelta = np.empty((B, K, D, L))
    ga = np.zeros((K, D, N))
    gbt = np.zeros((B, K, L, N))
    gct = np.zeros((B, K, L, N))
    gd = np.zeros((K, D))
    _backward(<double*>cnp.PyArray_DATA(gy), <double*>cnp.PyArray_DATA(u), <double*>cnp.PyArray_DATA(delta),
              <double*>cnp.PyArray_DATA(a), <double*>cnp.PyArray_DATA(bt), <double*>cnp.PyArray_DATA(ct),
              <double*>cnp.PyArray_DATA(dskip), <double*>cnp.PyArray_DATA(hs),
              <double*>cnp.PyArray_DATA(gu), <double*>cnp.PyArray_DATA(gdelta), <double*>cnp.PyArray_DATA(ga),
              <double*>cnp.PyArray_DATA(gbt), <double*>cnp.PyArray_DATA(gct), <double*>cnp.PyArray_DATA(gd),
              B, K, D, L, N)
    return gu, gdelta, ga, np.swapaxes(gbt, 2, 3), np.swapaxes(gct, 2, 3), gd


cdef void _backward(double* gy, double* u, double* delta, double* a, double* bt, double* ct,
                    double* dskip, double* hs, double* gu, double* gdelta, double* ga,
                    double* gb, double* gc, double* gd, Py_ssize_t B, Py_ssize_t K, Py_ssize_t D,
                    Py_ssize_t L, Py_ssize_t N) nogil:
    cdef Py_ssize_t b, k, d, t, n, seq, bk, row
    cdef double ut, dt, gyt, da, gdt, gut, gda, an, bn, ghn, dtu, gdsum
    cdef double* gh = <double*>malloc(N * sizeof(double))
    cdef double* da_next = <double*>malloc(N * sizeof(double))
    cdef double* zeros = <double*>malloc(N * sizeof(double))
    cdef double *arow, *garow, *brow, *crow, *gbrow, *gcrow, *hcur, *hprev
    for n in range(N):
        zeros[n] = 0.0
    for b in range(B):
        for k in range(K):
            bk = b * K + k
            for d in range(D):
                seq = (bk * D + d) * L
                arow = a + (k * D + d) * N
                garow = ga + (k * D + d) * N
                for n in range(N):
                    gh[n] = 0.0
                    da_next[n] = 0.0
                gdsum = 0.0
                for t in range(L - 1, -1, -1):
                    ut = u[seq + t]
                    dt = delta[seq + t]
                    gyt = gy[seq + t]
                    dtu = dt * ut
                    gdt = 0.0
                    gut = 0.0
                    gdsum = gdsum + gyt * ut
                    row = (bk * L + t) * N
                    brow = bt + row
                    crow = ct + row
                    gbrow = gb + row
                    gcrow = gc + row
                    hcur = hs + (seq + t) * N
                    hprev = hcur - N if t > 0 else zeros
                    for n in range(N):
                        an = arow[n]
                        bn = brow[n]
                        ghn = gh[n] * da_next[n] + gyt * crow[n]
                        gh[n] = ghn
                        gcrow[n] += gyt * hcur[n]
                        da = exp(dt * an)
                        gda = ghn * hprev[n] * da
                        gdt = gdt + gda * an + ghn * bn * ut
                        garow[n] += gda * dt
                        gbrow[n] += ghn * dtu
                        gut = gut + ghn * bn
                        da_next[n] = da
                    gu[seq + t] = gut * dt + gyt * dskip[k * D + d]
                    gdelta[seq + t] = gdt
                gd[k * D + d] += gdsum
    free(gh)
    free(da_next)
    free(zeros)
