"""Compiled vs numpy selective-scan kernels, forward and backward.

    python benchmarks/bench_kernels.py --lengths 64,256,1024,4096 --repeats 5

Shapes mimic one SS2D call: batch B, four directions, D channels, N states.
Prints a CSV with the best-of-``repeats`` wall time in milliseconds and the
speedup of the compiled kernel; also reports the worst disagreement between
the two backends so a fast-but-wrong build is caught here too.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from ssmheight import _kernels


def _inputs(rng, B, D, N, L):
    K = 4
    return [
        rng.standard_normal((B, K, D, L)),
        rng.uniform(1e-3, 0.5, (B, K, D, L)),
        -rng.uniform(0.5, 8.0, (K, D, N)),
        rng.standard_normal((B, K, N, L)),
        rng.standard_normal((B, K, N, L)),
        rng.standard_normal((K, D)),
    ]


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1e3


def run(lengths, repeats, batch, channels, state, seed):
    compiled = _kernels.compiled_backend
    if compiled is None:
        sys.exit("compiled kernel is not built; run `pip install -e . --no-build-isolation` first")
    py = _kernels.python_backend
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        args = _inputs(rng, batch, channels, state, L)
        g = rng.standard_normal(args[0].shape)
        y_c, h_c = compiled.scan_forward(*args)
        y_p, h_p = py.scan_forward(*args)
        err = float(np.abs(y_c - y_p).max())
        for a, b in zip(compiled.scan_backward(g, *args, h_c), py.scan_backward(g, *args, h_p)):
            err = max(err, float(np.abs(a - b).max()))
        t = {
            "fwd_cython": _best(lambda: compiled.scan_forward(*args), repeats),
            "fwd_python": _best(lambda: py.scan_forward(*args), repeats),
            "bwd_cython": _best(lambda: compiled.scan_backward(g, *args, h_c), repeats),
            "bwd_python": _best(lambda: py.scan_backward(g, *args, h_p), repeats),
        }
        rows.append((L, t, err))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lengths", default="64,256,1024,4096")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--state", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    lengths = [int(v) for v in a.lengths.split(",")]
    print("L,fwd_cython_ms,fwd_python_ms,fwd_speedup,bwd_cython_ms,bwd_python_ms,bwd_speedup,max_abs_diff")
    for L, t, err in run(lengths, a.repeats, a.batch, a.channels, a.state, a.seed):
        print(f"{L},{t['fwd_cython']:.3f},{t['fwd_python']:.3f},{t['fwd_python'] / t['fwd_cython']:.1f},"
              f"{t['bwd_cython']:.3f},{t['bwd_python']:.3f},{t['bwd_python'] / t['bwd_cython']:.1f},{err:.2e}")


if __name__ == "__main__":
    main()
