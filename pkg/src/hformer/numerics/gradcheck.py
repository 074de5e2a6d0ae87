"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                   coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar `f()` w.r.t. entries of `x.data` (perturbed in place)."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            out[n] = (fp - fm) / (2.0 * eps)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    `f` maps `x` to a scalar tensor; `x` must be 64-bit.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check runs in 64-bit; cast the input first")
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {y.shape}")
    if y._node is None:
        analytic = np.zeros(x.size)
    else:
        backward(y)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    numeric = numerical_grad(lambda: f(x), x, eps)
    return float(relative_error(analytic, numeric).max(initial=0.0))


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                      n_samples: int = 50, eps: float = 1e-5, seed: int = 0,
                      min_abs_grad: float = 0.0) -> tuple[float, list[tuple[str, int, float, float]]]:
    """Check a random subset of scalar parameter entries of a larger model.

    Entries are drawn uniformly over all parameters (optionally only those whose
    analytic gradient magnitude exceeds `min_abs_grad`).  Returns the max
    relative error and the list of (name, flat index, analytic, numeric).
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    entries = []
    for name, p in params.items():
        g = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        for i in range(p.size):
            if abs(g[i]) >= min_abs_grad:
                entries.append((name, i, float(g[i])))
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(entries), size=min(n_samples, len(entries)), replace=False)
    rows = []
    worst = 0.0
    for j in sorted(pick):
        name, i, a = entries[j]
        num = float(numerical_grad(loss_fn, params[name], eps, coords=[i])[0])
        rows.append((name, i, a, num))
        worst = max(worst, float(relative_error(a, num)))
    return worst, rows
