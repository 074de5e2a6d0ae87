"""Finite-difference check suite over the primitives, a CAT block and a tiny Hformer.

Everything runs in float64.  Each check returns its max relative error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import CatBlock, CatBlockConfig
from .model import Hformer, HformerConfig
from .numerics import (Tensor, bilinear_resize, conv2d, cross_entropy, gelu, grad_check,
                       grad_check_params, layer_norm, linear, ops, softmax)
from .params import ParamStore


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float


def _t(a) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _weighted(f: Callable[[Tensor], Tensor], shape_out, rng) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=shape_out))
    return lambda v: ops.sum(ops.mul(f(v), r))


def primitive_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    bias = Tensor(rng.normal(size=5))
    gamma, beta = _t(rng.normal(size=4)), _t(rng.normal(size=4))
    img = rng.normal(size=(1, 2, 5, 6))
    labels = rng.integers(0, 3, size=(2, 2, 3))

    def one(f, x, out_shape):
        return lambda: grad_check(_weighted(f, out_shape, rng), _t(x))

    return {
        "add": one(lambda v: ops.add(v, Tensor(a)), a, a.shape),
        "mul": one(lambda v: ops.mul(v, Tensor(a)), a, a.shape),
        "div": one(lambda v: ops.div(Tensor(a), ops.add(ops.mul(v, v), 1.0)), a, a.shape),
        "exp": one(ops.exp, a, a.shape),
        "log": one(lambda v: ops.log(ops.add(ops.mul(v, v), 0.5)), a, a.shape),
        "power": one(lambda v: ops.power(ops.add(ops.mul(v, v), 1.0), 1.5), a, a.shape),
        "matmul": one(lambda v: ops.matmul(v, Tensor(b)), a, (3, 5)),
        "transpose": one(lambda v: ops.transpose(v, (1, 0)), a, (4, 3)),
        "reshape": one(lambda v: ops.reshape(v, (2, 6)), a, (2, 6)),
        "concat": one(lambda v: ops.concat([v, ops.mul(v, v)], axis=1), a, (3, 8)),
        "take": one(lambda v: ops.take(v, np.array([[0, 2], [2, 1]])), a, (2, 2, 4)),
        "sum": one(lambda v: ops.sum(v, axis=0), a, (4,)),
        "mean": one(lambda v: ops.mean(v, axis=1), a, (3,)),
        "softmax": one(lambda v: softmax(v, axis=-1), a, a.shape),
        "layer_norm": one(lambda v: layer_norm(v, gamma, beta), a, a.shape),
        "gelu": one(gelu, a, a.shape),
        "linear": one(lambda v: linear(v, Tensor(b), bias), a, (3, 5)),
        "conv2d": one(lambda v: conv2d(v, Tensor(w), None, 2, 1), img, (1, 3, 3, 3)),
        "conv2d_edge": one(lambda v: conv2d(v, Tensor(w), None, 1, 1, "edge"), img, (1, 3, 5, 6)),
        "bilinear_resize": one(lambda v: bilinear_resize(v, 9, 4), img, (1, 2, 9, 4)),
        "cross_entropy": lambda: grad_check(lambda v: cross_entropy(v, labels),
                                            _t(rng.normal(size=(2, 3, 2, 3)))),
    }


def cat_block_check(seed: int = 0) -> float:
    """C=4, H=W=4, p=2: input and every parameter entry."""
    rng = np.random.default_rng(seed)
    store = ParamStore(np.float64)
    block = CatBlock(store, "cat", CatBlockConfig(4, 2, 1), (4, 4), rng)
    for _, p in store.items():
        p.data[...] = rng.normal(0, 0.3, p.shape)
    x = rng.normal(size=(1, 4, 4, 4))
    r = Tensor(rng.normal(size=x.shape))
    err_x = grad_check(lambda v: ops.sum(ops.mul(block(v), r)), _t(x))
    err_p, _ = grad_check_params(lambda: ops.sum(ops.mul(block(Tensor(x)), r)), dict(store.items()),
                                 n_samples=store.num_elements())
    return max(err_x, err_p)


def model_check(seed: int = 0, n_samples: int = 50) -> float:
    """32x32 input, C=4, K=4; `n_samples` random parameter entries."""
    cfg = HformerConfig(height=32, width=32, base_channels=4, stage_multiplier=4, num_classes=4)
    model = Hformer(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-np.pi, np.pi, size=(1, 1, 32, 32))
    labels = rng.integers(0, 4, size=(1, 32, 32))
    worst, _ = grad_check_params(lambda: cross_entropy(model(x), labels), dict(model.params.items()),
                                 n_samples=n_samples, seed=seed)
    return worst


def run_suite(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    checks: list[tuple[str, Callable[[], float]]] = [
        (f"primitive.{k}", f) for k, f in primitive_checks(seed).items()]
    checks.append(("cat_block", lambda: cat_block_check(seed)))
    if include_model:
        checks.append(("hformer.tiny", lambda: model_check(seed)))
    out = []
    for name, fn in checks:
        t0 = time.perf_counter()
        err = fn()
        out.append(CheckResult(name, float(err), time.perf_counter() - t0))
    return out
