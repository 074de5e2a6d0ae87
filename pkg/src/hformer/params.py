"""Named parameter storage and initializers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .numerics import Tensor, layer_norm, linear


class ParamStore:
    """Ordered name -> Tensor map; insertion order is the canonical order.

    Each entry records whether weight decay applies to it.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._decay: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, decay: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        self._decay[name] = decay
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter names differ: missing {sorted(missing)[:5]}, "
                           f"unexpected {sorted(extra)[:5]}")
        for k, t in self._params.items():
            v = np.asarray(state[k])
            if v.shape != t.shape:
                raise ValueError(f"{k}: shape {v.shape} != {t.shape}")
            t.data[...] = v


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear:
    """Affine map over the last axis, weight stored (in, out)."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, std: float = 0.02, bias: bool = True):
        self.weight = store.add(f"{name}.weight", trunc_normal(rng, (n_in, n_out), std))
        self.bias = store.add(f"{name}.bias", np.zeros(n_out), decay=False) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def zero_(self) -> None:
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0

    def identity_(self) -> None:
        n_in, n_out = self.weight.shape
        if n_in != n_out:
            raise ValueError("identity needs a square map")
        self.weight.data[...] = np.eye(n_in)
        if self.bias is not None:
            self.bias.data[...] = 0


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, n: int, eps: float = 1e-5):
        self.gamma = store.add(f"{name}.gamma", np.ones(n), decay=False)
        self.beta = store.add(f"{name}.beta", np.zeros(n), decay=False)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)
