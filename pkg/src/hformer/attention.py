"""Cross Attention Transformer (CAT) block: inner-patch and cross-patch attention.

Feature maps inside the transformer are channels-last, (N, H, W, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, gelu, matmul, ops, softmax
from .params import LayerNorm, Linear, ParamStore


@dataclass
class CatBlockConfig:
    channels: int
    patch_size: int = 4
    num_heads: int = 1
    mlp_ratio: float = 4.0
    mlp_layers: int = 2

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.channels % self.num_heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.num_heads}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.mlp_layers < 1:
            raise ValueError("mlp_layers must be >= 1")


def relative_position_index(gh: int, gw: int) -> np.ndarray:
    """(T, T) table index for a gh x gw token grid; equal offsets share an entry."""
    ys, xs = np.divmod(np.arange(gh * gw), gw)
    dy = ys[:, None] - ys[None, :] + gh - 1
    dx = xs[:, None] - xs[None, :] + gw - 1
    return dy * (2 * gw - 1) + dx


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ops.transpose(t, axes)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v over the last two axes."""
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ValueError(f"query dim {d} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = ops.mul(matmul(q, _swap_last(k)), 1.0 / math.sqrt(d))
    if bias is not None:
        scores = ops.add(scores, bias)
    return matmul(softmax(scores, axis=-1), v)


class _TokenAttention:
    """Multi-head self-attention over token sets with a relative-position table.

    With a single token the softmax is identically 1, so the query/key maps and
    the table would never receive gradient; they are not created in that case.
    The key map has no bias: it would shift each score row by a constant.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 grid: tuple[int, int], rng: np.random.Generator):
        self.dim, self.heads = dim, heads
        self.tokens = grid[0] * grid[1]
        self.single = self.tokens == 1
        if not self.single:
            self.q = Linear(store, f"{name}.q", dim, dim, rng)
            self.k = Linear(store, f"{name}.k", dim, dim, rng, bias=False)
            table = (2 * grid[0] - 1) * (2 * grid[1] - 1)
            self.table = store.add(f"{name}.rel_bias", np.zeros((table, heads)), decay=False)
            self.index = relative_position_index(*grid)
        self.v = Linear(store, f"{name}.v", dim, dim, rng)
        self.proj = Linear(store, f"{name}.proj", dim, dim, rng)

    def bias(self) -> Tensor:
        b = ops.take(self.table, self.index)                  # (T, T, heads)
        return ops.transpose(b, (2, 0, 1))                    # (heads, T, T)

    def __call__(self, t: Tensor) -> Tensor:
        # t: (B, T, dim)
        if self.single:
            return self.proj(self.v(t))
        b, n, _ = t.shape
        h, d = self.heads, self.dim // self.heads

        def split(z):
            return ops.transpose(ops.reshape(z, (b, n, h, d)), (0, 2, 1, 3))

        out = attention(split(self.q(t)), split(self.k(t)), split(self.v(t)), self.bias())
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, n, self.dim))
        return self.proj(out)


def _check_divisible(h: int, w: int, p: int) -> None:
    if h % p or w % p:
        raise ValueError(f"feature map {h}x{w} not divisible by patch size {p}")


class InnerPatchAttention:
    """IPSA: attention among the p*p pixels of each non-overlapping window."""

    def __init__(self, store: ParamStore, name: str, channels: int, patch: int, heads: int,
                 rng: np.random.Generator):
        self.p = patch
        self.attn = _TokenAttention(store, name, channels, heads, (patch, patch), rng)

    def __call__(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        p = self.p
        _check_divisible(h, w, p)
        gh, gw = h // p, w // p
        t = ops.reshape(x, (n, gh, p, gw, p, c))
        t = ops.reshape(ops.transpose(t, (0, 1, 3, 2, 4, 5)), (n * gh * gw, p * p, c))
        t = self.attn(t)
        t = ops.transpose(ops.reshape(t, (n, gh, gw, p, p, c)), (0, 1, 3, 2, 4, 5))
        return ops.reshape(t, (n, h, w, c))


class CrossPatchAttention:
    """CPSA: per channel, attention among the patches of that single-channel map.

    Tokens are flattened p*p patches; projections are shared across channels.
    """

    def __init__(self, store: ParamStore, name: str, patch: int, size: tuple[int, int],
                 rng: np.random.Generator):
        _check_divisible(size[0], size[1], patch)
        self.p = patch
        self.grid = (size[0] // patch, size[1] // patch)
        self.attn = _TokenAttention(store, name, patch * patch, 1, self.grid, rng)

    def __call__(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        p = self.p
        _check_divisible(h, w, p)
        gh, gw = h // p, w // p
        if (gh, gw) != self.grid:
            raise ValueError(f"CPSA built for a {self.grid} patch grid, got {(gh, gw)}")
        t = ops.reshape(x, (n, gh, p, gw, p, c))
        t = ops.reshape(ops.transpose(t, (0, 5, 1, 3, 2, 4)), (n * c, gh * gw, p * p))
        t = self.attn(t)
        t = ops.transpose(ops.reshape(t, (n, c, gh, gw, p, p)), (0, 2, 4, 3, 5, 1))
        return ops.reshape(t, (n, h, w, c))


class Mlp:
    def __init__(self, store: ParamStore, name: str, channels: int, ratio: float, layers: int,
                 rng: np.random.Generator):
        hidden = max(1, int(round(channels * ratio)))
        widths = [channels] + [hidden] * (layers - 1) + [channels]
        self.layers = [Linear(store, f"{name}.fc{i + 1}", a, b, rng)
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = gelu(x)
            x = layer(x)
        return x


class CatBlock:
    """Six pre-norm residual steps: IPSA, MLP, CPSA, MLP, IPSA, MLP."""

    def __init__(self, store: ParamStore, name: str, cfg: CatBlockConfig, size: tuple[int, int],
                 rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        c, p = cfg.channels, cfg.patch_size
        _check_divisible(size[0], size[1], p)
        self.norms = [LayerNorm(store, f"{name}.norm{i + 1}", c) for i in range(6)]
        self.ipsa1 = InnerPatchAttention(store, f"{name}.ipsa1", c, p, cfg.num_heads, rng)
        self.mlp1 = Mlp(store, f"{name}.mlp1", c, cfg.mlp_ratio, cfg.mlp_layers, rng)
        self.cpsa = CrossPatchAttention(store, f"{name}.cpsa", p, size, rng)
        self.mlp2 = Mlp(store, f"{name}.mlp2", c, cfg.mlp_ratio, cfg.mlp_layers, rng)
        self.ipsa2 = InnerPatchAttention(store, f"{name}.ipsa2", c, p, cfg.num_heads, rng)
        self.mlp3 = Mlp(store, f"{name}.mlp3", c, cfg.mlp_ratio, cfg.mlp_layers, rng)

    def branches(self):
        return [self.ipsa1, self.mlp1, self.cpsa, self.mlp2, self.ipsa2, self.mlp3]

    def __call__(self, x: Tensor) -> Tensor:
        for norm, branch in zip(self.norms, self.branches()):
            x = ops.add(branch(norm(x)), x)
        return x

    def zero_branches(self) -> None:
        """Zero every branch's last map, so the block becomes the identity."""
        for branch in self.branches():
            if isinstance(branch, Mlp):
                branch.layers[-1].zero_()
            else:
                branch.attn.proj.zero_()
