"""Finite-difference oracle for validating reverse-mode gradients.

The oracle only ever calls the forward function on plain arrays, so it shares
no code path with the backward closures it is used to check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def fd_gradient_oracle(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` for every element."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(base))
        flat[i] = orig - eps
        fm = float(f(base))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective while perturbing element {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(base.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / (||a|| + ||b||)``, zero when both vanish."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = float(np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b)))
    if den < 1e-300:
        return 0.0
    return num / den


def reverse_mode_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list:
    """Gradients of scalar ``fn(*tensors)`` with respect to every input array."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and FD gradients over all inputs."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = reverse_mode_grads(fn, arrays)
    worst = 0.0
    for k, arr in enumerate(arrays):
        def f_k(xk, k=k):
            args = [Tensor(a) for a in arrays]
            args[k] = Tensor(xk)
            return fn(*args).item()

        numeric = fd_gradient_oracle(f_k, arr, eps)
        worst = max(worst, relative_error(analytic[k], numeric))
    return worst


def check_directional(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> float:
    """Compare ``<grad, v>`` with the central difference along one random direction ``v``.

    Used for composites whose input is too large for element-wise differences.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = reverse_mode_grads(fn, arrays)
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    predicted = sum(float((g * d).sum()) for g, d in zip(analytic, dirs))

    def f_at(t):
        return fn(*[Tensor(a + t * d) for a, d in zip(arrays, dirs)]).item()

    fp, fm = f_at(eps), f_at(-eps)
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError("non-finite objective along probe direction")
    numeric = (fp - fm) / (2.0 * eps)
    return relative_error(np.array([predicted]), np.array([numeric]))
