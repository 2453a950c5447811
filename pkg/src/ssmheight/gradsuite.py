"""Randomised finite-difference audit of every differentiable operation.

Small operations are checked element by element; whole modules are checked
along random directions in the joint (input, parameter) space, so every
parameter's gradient is exercised without O(n) forward passes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .fpn import SMambaRefine
from .heads import MHR, MHRConfig
from .mam import MAM
from .nn import Module
from .ssm import selective_scan
from .tensor import Tensor, check_gradients, no_grad, ops, relative_error
from .vmamba import SS2D, Backbone, BlockConfig, VMambaBlock

DEFAULT_TOL = 1e-4
BACKBONE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _away_from(x: np.ndarray, kinks, margin: float = 1e-2) -> np.ndarray:
    # nudge samples off nondifferentiable points so central differences stay one-sided-free
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, k + np.sign(x - k + 1e-300) * margin * 2, x)
    return x


def _proj(shape, rng) -> np.ndarray:
    return rng.standard_normal(shape)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, w))


# -- per-element cases: each returns (fn, arrays) ------------------------------

def _unary(op, lo=-3.0, hi=3.0, kinks=()):
    def make(rng):
        x = _away_from(rng.uniform(lo, hi, (3, 4)), kinks)
        w = _proj(x.shape, rng)
        return (lambda a: _scalar(op(a), w)), [x]
    return make


def _binary(op, positive_b=False):
    def make(rng):
        shapes = [((3, 4), (3, 4)), ((2, 3, 4), (4,)), ((3, 1), (1, 4))][rng.integers(3)]
        a = rng.standard_normal(shapes[0])
        b = rng.uniform(0.5, 2.0, shapes[1]) * rng.choice([-1, 1], shapes[1]) if positive_b else rng.standard_normal(shapes[1])
        w = _proj(np.broadcast_shapes(*shapes), rng)
        return (lambda x, y: _scalar(op(x, y), w)), [a, b]
    return make


def _case_pow(rng):
    x = rng.uniform(0.5, 2.0, (3, 4))
    p = float(rng.uniform(-2, 3))
    w = _proj(x.shape, rng)
    return (lambda a: _scalar(ops.pow(a, p), w)), [x]


def _case_where(rng):
    a, b = rng.standard_normal((2, 3, 4))
    mask = rng.random((3, 4)) < 0.5
    w = _proj(a.shape, rng)
    return (lambda x, y: _scalar(ops.where(mask, x, y), w)), [a, b]


def _case_reduce(rng):
    x = rng.standard_normal((2, 3, 4))
    axis = [None, 0, 1, 2, (0, 2)][rng.integers(5)]
    red = [ops.sum, ops.mean][rng.integers(2)]
    out_shape = np.sum(x, axis=axis, keepdims=True).shape
    w = _proj(out_shape, rng)
    return (lambda a: _scalar(red(a, axis=axis, keepdims=True), w)), [x]


def _case_shape(rng):
    x = rng.standard_normal((2, 3, 4))
    w = _proj((4, 2, 3), rng)
    wi = _proj((2, 2), rng)
    wc = _proj((2, 5, 4), rng)
    y = rng.standard_normal((2, 2, 4))

    def f(a, b):
        t = ops.transpose(ops.reshape(a, (2, 3, 4)), (2, 0, 1))
        g = ops.getitem(a, (slice(None), 1, slice(0, 2)))
        c = ops.concat([a, b], axis=1)
        return ops.add(ops.add(_scalar(t, w), _scalar(g, wi)), _scalar(c, wc))
    return f, [x, y]


def _case_matmul(rng):
    shapes = [((3, 4), (4, 5)), ((2, 3, 4), (4, 2)), ((2, 3, 4), (2, 4, 5)), ((4, 3), (2, 3, 2))][rng.integers(4)]
    a, b = rng.standard_normal(shapes[0]), rng.standard_normal(shapes[1])
    w = _proj(np.matmul(a, b).shape, rng)
    return (lambda x, y: _scalar(ops.matmul(x, y), w)), [a, b]


def _case_conv(rng):
    kind = rng.integers(5)
    B, C, H = 2, 4, 6
    s, p, d, g, k, co = 1, 1, 1, 1, 3, 3
    if kind == 1:
        s, p = 2, 1
    elif kind == 2:
        d, p = 2, 2
    elif kind == 3:
        g, co = C, C
    elif kind == 4:
        g, co, k, p = 2, 4, 1, 0
    x = rng.standard_normal((B, C, H, H))
    kern = rng.standard_normal((co, C // g, k, k)) * 0.3
    bias = rng.standard_normal(co)
    out = ops.conv2d(Tensor(x), Tensor(kern), Tensor(bias), s, p, d, g)
    w = _proj(out.shape, rng)
    return (lambda a, kk, bb: _scalar(ops.conv2d(a, kk, bb, s, p, d, g), w)), [x, kern, bias]


def _case_pool(rng):
    H, W = rng.integers(3, 9, size=2)
    oh, ow = rng.integers(1, H + 1), rng.integers(1, W + 1)
    x = rng.standard_normal((2, 3, H, W))
    w = _proj((2, 3, oh, ow), rng)
    return (lambda a: _scalar(ops.pool_adaptive_avg(a, int(oh), int(ow)), w)), [x]


def _case_resample(rng):
    x = rng.standard_normal((2, 2, 3, 4))
    if rng.random() < 0.5:
        oh, ow = (int(v) for v in rng.integers(2, 10, size=2))
        w = _proj((2, 2, oh, ow), rng)
        return (lambda a: _scalar(ops.upsample_bilinear(a, oh, ow), w)), [x]
    f = int(rng.integers(1, 4))
    w = _proj((2, 2, 3 * f, 4 * f), rng)
    return (lambda a: _scalar(ops.upsample_nearest(a, f), w)), [x]


def _case_softmax(rng):
    x = rng.standard_normal((3, 5)) * 2
    axis = int(rng.integers(2))
    w = _proj(x.shape, rng)
    return (lambda a: _scalar(ops.softmax(a, axis=axis), w)), [x]


def _case_layernorm(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    w = _proj(x.shape, rng)
    return (lambda a, g, b: _scalar(ops.layer_norm(a, g, b, axis=1), w)), [x, gamma, beta]


def _case_scan(rng):
    B, K, D, L, N = 1, 2, 2, int(rng.integers(2, 9)), 3
    u = rng.standard_normal((B, K, D, L))
    delta = rng.uniform(0.05, 0.8, (B, K, D, L))
    a = -rng.uniform(0.2, 2.0, (K, D, N))
    bm, cm = rng.standard_normal((2, B, K, N, L))
    dsk = rng.standard_normal((K, D))
    w = _proj(u.shape, rng)
    return (lambda *t: _scalar(selective_scan(*t), w)), [u, delta, a, bm, cm, dsk]


def _edge_margin_ok(s: np.ndarray, margin: float = 1e-2) -> bool:
    with no_grad():
        lap = np.abs(ops.conv2d(Tensor(s), Tensor(losses.LAPLACIAN[None, None]), padding=1).data)
    return bool(np.all(lap > margin) and np.all(np.abs(lap - 1.0) > margin))


def _loss_case(name):
    def make(rng):
        shape = (2, 1, 4, 4)
        s_gt = (rng.random(shape) < 0.4).astype(float)
        s_pred = rng.uniform(0.05, 0.95, shape)
        if name in ("edge", "seg", "total"):
            # |L * s| near 0 is the abs kink and a -log singularity of the edge BCE; near 1 the clamp kink
            while not _edge_margin_ok(s_pred):
                s_pred = rng.uniform(0.05, 0.95, shape)
        h_gt = rng.uniform(0, 10, shape) * s_gt
        h_pred = h_gt + rng.standard_normal(shape) * 2
        h_pred = np.where(np.abs(np.abs(h_pred - h_gt) - 1.0) < 1e-2, h_pred + 0.05, h_pred)
        if name == "huber":
            return (lambda h: losses.loss_huber(h_gt, h, 1.0)), [h_pred]
        if name == "total":
            return (lambda s, h: losses.loss_total(s_gt, s, h_gt, h)), [s_pred, h_pred]
        fn = {"ce": losses.loss_ce, "dice": losses.loss_dice, "edge": losses.loss_edge, "seg": losses.loss_seg}[name]
        return (lambda s: fn(s_gt, s)), [s_pred]
    return make


# -- module cases: directional over (input, parameters) ------------------------

def _randomize(module: Module, rng, scale: float = 0.3) -> None:
    # break zero inits (alpha, zeroed projections) so every gradient is non-trivial
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def module_directional(forward: Callable[[Tensor], Tensor], module: Module, x: np.ndarray,
                       rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Directional FD check of ``sum(w * forward(x))`` over ``x`` and all parameters.

    The numeric side perturbs parameter values in place and only ever runs the
    forward pass under ``no_grad``.
    """
    params = module.parameters()
    originals = [p.data.copy() for p in params]
    with no_grad():
        w = _proj(forward(Tensor(x)).shape, rng)
    module.zero_grad()
    xt = Tensor(x.copy(), requires_grad=True)
    _scalar(forward(xt), w).backward()
    grads = [xt.grad] + [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    dirs = [rng.standard_normal(g.shape) for g in grads]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    predicted = sum(float((g * d).sum()) for g, d in zip(grads, dirs))

    def f_at(t: float) -> float:
        for p, o, d in zip(params, originals, dirs[1:]):
            p.data = o + t * d
        with no_grad():
            return _scalar(forward(Tensor(x + t * dirs[0])), w).item()

    try:
        numeric = (f_at(eps) - f_at(-eps)) / (2.0 * eps)
    finally:
        for p, o in zip(params, originals):
            p.data = o
        module.zero_grad()
    return relative_error(np.array([predicted]), np.array([numeric]))


def _ss2d_case(rng):
    C = int(rng.integers(2, 5))
    m = SS2D(C, rng, state=3)
    _randomize(m, rng, 0.1)
    x = rng.standard_normal((1, C, int(rng.integers(2, 6)), int(rng.integers(2, 6))))
    return m, m.forward, x


def _vmamba_case(rng):
    C = int(rng.integers(2, 5))
    m = VMambaBlock(C, rng, state=3, ffn_ratio=1.5)
    m.eval()
    _randomize(m, rng, 0.1)
    x = rng.standard_normal((1, C, 4, 4))
    return m, m.forward, x


def _mam_case(rng):
    C = int(rng.integers(2, 6))
    m = MAM(C, rng)
    _randomize(m, rng, 0.5)
    x = rng.standard_normal((2, C, int(rng.integers(2, 6)), int(rng.integers(2, 6))))
    return m, m.forward, x


def _refine_case(rng):
    C = int(rng.integers(2, 4))
    m = SMambaRefine(C, rng, use_spatial_branch=True, state=3, ffn_ratio=1.5, spatial_rng=rng)
    m.eval()
    _randomize(m, rng, 0.1)
    x = rng.standard_normal((1, C, 4, 4))
    return m, m.forward, x


def _mhr_case(rng):
    m = MHR(MHRConfig(epsilon=float(rng.uniform(0.05, 0.9)), gamma=float(rng.uniform(0.5, 3)), width=3), rng)
    _randomize(m, rng, 0.05)
    s = rng.uniform(0, 1, (1, 1, 6, 6))
    x = rng.uniform(3.0, 6.0, (1, 1, 6, 6))   # H_raw far above zero keeps the final ReLU smooth

    def fwd(h):
        return m(h, s)[0]
    return m, fwd, x


def _backbone_case(rng):
    cfg = BlockConfig(channels=[2, 3, 4, 5], depths=[1, 1, 1, 1], patch_size=2, drop_path=0.0, state=2)
    m = Backbone(cfg, rng, rng)
    m.eval()
    _randomize(m, rng, 0.05)
    x = rng.standard_normal((1, 3, 16, 16))
    w = [rng.standard_normal((1, c, 16 // (2 * 2 ** i), 16 // (2 * 2 ** i))) for i, c in enumerate(cfg.channels)]

    def fwd(img):
        feats = m(img)
        return ops.concat([ops.reshape(ops.mul(f, wi), (1, -1)) for f, wi in zip(feats, w)], axis=1)
    return m, fwd, x


ELEMENT_CASES = {
    "add": _binary(ops.add), "sub": _binary(ops.sub), "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True), "where": _case_where, "pow": _case_pow,
    "neg": _unary(ops.neg), "exp": _unary(ops.exp), "log": _unary(ops.log, 0.2, 5.0),
    "relu": _unary(ops.relu, kinks=(0.0,)), "sigmoid": _unary(ops.sigmoid), "silu": _unary(ops.silu),
    "softplus": _unary(ops.softplus), "abs": _unary(ops.abs, kinks=(0.0,)),
    "clamp": _unary(lambda a: ops.clamp(a, -1.0, 1.0), kinks=(-1.0, 1.0)),
    "reduce": _case_reduce, "shape_ops": _case_shape,
    "matmul": _case_matmul, "conv2d": _case_conv, "pool_adaptive_avg": _case_pool, "resample": _case_resample,
    "softmax": _case_softmax, "layer_norm": _case_layernorm, "selective_scan": _case_scan,
    "loss_ce": _loss_case("ce"), "loss_dice": _loss_case("dice"), "loss_edge": _loss_case("edge"),
    "loss_seg": _loss_case("seg"), "loss_huber": _loss_case("huber"), "loss_total": _loss_case("total"),
}
MODULE_CASES = {
    "ss2d": _ss2d_case, "vmamba_block": _vmamba_case, "mam": _mam_case,
    "smamba_refine": _refine_case, "mhr": _mhr_case, "backbone": _backbone_case,
}
GROUPS = {
    "elementwise": ["add", "sub", "mul", "div", "where", "pow", "neg", "exp", "log", "relu", "sigmoid",
                    "silu", "softplus", "abs", "clamp", "reduce", "shape_ops"],
    "matmul": ["matmul"], "conv": ["conv2d"], "pooling": ["pool_adaptive_avg", "resample"],
    "softmax": ["softmax"], "layernorm": ["layer_norm"], "scan": ["selective_scan"],
    "ss2d": ["ss2d"], "vmamba": ["vmamba_block"], "mam": ["mam"], "smamba_fpn": ["smamba_refine"],
    "mhr": ["mhr"], "losses": ["loss_ce", "loss_dice", "loss_edge", "loss_seg", "loss_huber", "loss_total"],
    "backbone": ["backbone"],
}


def resolve(module: str) -> list:
    if module == "all":
        return list(ELEMENT_CASES) + list(MODULE_CASES)
    if module in GROUPS:
        return GROUPS[module]
    if module in ELEMENT_CASES or module in MODULE_CASES:
        return [module]
    raise KeyError(f"unknown gradcheck target {module!r}; choose 'all', a group {sorted(GROUPS)} or an op name")


def run_check(name: str, trials: int, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        if name in ELEMENT_CASES:
            fn, arrays = ELEMENT_CASES[name](rng)
            err = check_gradients(fn, arrays, eps=1e-6)
        else:
            module, fwd, x = MODULE_CASES[name](rng)
            err = module_directional(fwd, module, x, rng)
        worst = max(worst, err)
    tol = BACKBONE_TOL if name == "backbone" else DEFAULT_TOL
    return CheckResult(name, trials, worst, tol, time.perf_counter() - t0)


def run_suite(module: str = "all", trials: int = 100, seed: int = 0) -> list:
    return [run_check(name, trials, seed) for name in resolve(module)]


def format_table(results: list) -> str:
    lines = [f"{'op':<20} {'trials':>6} {'max_rel_err':>12} {'tol':>8} {'seconds':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.trials:>6} {r.max_rel_err:>12.3e} {r.tol:>8.0e} {r.seconds:>8.2f}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)


__all__ = ["CheckResult", "run_check", "run_suite", "resolve", "format_table", "module_directional",
           "relative_error", "GROUPS"]
