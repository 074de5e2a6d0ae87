"""Hformer: strided-conv backbone, CAT encoder/decoder with skips, fused FPN head.

The backbone is a plain stride-2 conv ladder standing in for HRNet; it keeps
the four-scale contract (H/4 .. H/32 with channels C, mC, m^2 C, m^3 C).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .attention import CatBlock, CatBlockConfig
from .numerics import Tensor, bilinear_resize, conv2d, gelu, no_grad, ops
from .params import LayerNorm, Linear, ParamStore, kaiming_normal

HEAD_MODES = ("ifpn", "single")
POSITION_KINDS = ("sinusoidal", "none")


@dataclass
class HformerConfig:
    height: int = 64
    width: int = 64
    base_channels: int = 8
    stage_multiplier: int = 4
    blocks_per_stage: int = 1
    patch_size: int = 4
    patch_sizes: tuple[int, ...] | None = None   # explicit per-stage override
    num_heads: int = 1
    mlp_ratio: float = 4.0
    mlp_layers: int = 2
    num_classes: int = 34
    head_mode: str = "ifpn"
    position: str = "sinusoidal"
    position_all_stages: bool = True
    input_scale: float = 1.0 / math.pi

    def validate(self) -> None:
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ValueError(f"input {self.height}x{self.width} must be a positive multiple of 32")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.stage_multiplier < 1 or self.base_channels < 1:
            raise ValueError("channel ladder must be positive")
        if (4 * self.base_channels) % self.stage_multiplier:
            raise ValueError("patch expanding needs 4*C divisible by the stage multiplier")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.position not in POSITION_KINDS:
            raise ValueError(f"position must be one of {POSITION_KINDS}")
        if self.blocks_per_stage < 0:
            raise ValueError("blocks_per_stage must be >= 0")
        if self.patch_sizes is not None and len(self.patch_sizes) != 4:
            raise ValueError("patch_sizes needs one entry per stage")
        for i in range(4):
            h, w = self.stage_size(i)
            p = self.stage_patch(i)
            if h % p or w % p:
                raise ValueError(f"stage {i + 1} size {h}x{w} not divisible by patch {p}")
        for c in self.stage_channels():
            if c % self.num_heads:
                raise ValueError(f"stage width {c} not divisible by {self.num_heads} heads")

    def stage_size(self, i: int) -> tuple[int, int]:
        return self.height // (4 * 2 ** i), self.width // (4 * 2 ** i)

    def stage_channels(self) -> list[int]:
        return [self.base_channels * self.stage_multiplier ** i for i in range(4)]

    def stage_patch(self, i: int) -> int:
        if self.patch_sizes is not None:
            return int(self.patch_sizes[i])
        h, w = self.stage_size(i)
        p = max(1, min(self.patch_size, h, w))
        while h % p or w % p:
            p -= 1
        return p

    def block_config(self, i: int) -> CatBlockConfig:
        return CatBlockConfig(self.stage_channels()[i], self.stage_patch(i), self.num_heads,
                              self.mlp_ratio, self.mlp_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["patch_sizes"] is not None:
            d["patch_sizes"] = list(d["patch_sizes"])
        return d


# -- rearrangements ---------------------------------------------------------------

def space_to_depth(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, H/2, W/2, 4C); channel index c*4 + dy*2 + dx."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"space_to_depth needs even extents, got {h}x{w}")
    t = ops.reshape(x, (n, h // 2, 2, w // 2, 2, c))
    t = ops.transpose(t, (0, 1, 3, 5, 2, 4))
    return ops.reshape(t, (n, h // 2, w // 2, 4 * c))


def depth_to_space(x: Tensor) -> Tensor:
    """Inverse of `space_to_depth`: (N, H, W, 4C) -> (N, 2H, 2W, C)."""
    n, h, w, c4 = x.shape
    if c4 % 4:
        raise ValueError(f"depth_to_space needs channels divisible by 4, got {c4}")
    c = c4 // 4
    t = ops.reshape(x, (n, h, w, c, 2, 2))
    t = ops.transpose(t, (0, 1, 4, 2, 5, 3))
    return ops.reshape(t, (n, 2 * h, 2 * w, c))


def nchw_to_nhwc(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 2, 3, 1))


def nhwc_to_nchw(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 3, 1, 2))


def sinusoidal_table(h: int, w: int, c: int) -> np.ndarray:
    """(H, W, C) fixed encoding: first half of channels encode the row, second the column."""
    half_r = c // 2
    half_c = c - half_r

    def encode(pos, n):
        out = np.zeros((len(pos), n))
        freqs = 1.0 / (10000.0 ** (np.arange(0, n, 2) / max(n, 1)))
        ang = pos[:, None] * freqs[None, :]
        out[:, 0::2] = np.sin(ang)[:, : (n + 1) // 2]
        out[:, 1::2] = np.cos(ang)[:, : n // 2]
        return out

    rows = encode(np.arange(h, dtype=np.float64), half_r)
    cols = encode(np.arange(w, dtype=np.float64), half_c)
    table = np.zeros((h, w, c))
    table[:, :, :half_r] = rows[:, None, :]
    table[:, :, half_r:] = cols[None, :, :]
    return table


class AbsolutePosition:
    """x + gate * fixed 2-D sinusoidal table; gate is learnable, starts at 1."""

    def __init__(self, store: ParamStore, name: str, channels: int, size: tuple[int, int]):
        self.table = Tensor(sinusoidal_table(size[0], size[1], channels).astype(store.dtype))
        self.gate = store.add(f"{name}.gate", np.ones(1), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, ops.mul(self.table, self.gate))


class PatchProjection:
    """2x2 space-to-depth, LayerNorm over 4C, linear 4C -> mC."""

    def __init__(self, store: ParamStore, name: str, channels: int, multiplier: int,
                 rng: np.random.Generator):
        self.norm = LayerNorm(store, f"{name}.norm", 4 * channels)
        self.linear = Linear(store, f"{name}.linear", 4 * channels, multiplier * channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear(self.norm(space_to_depth(x)))


class PatchExpanding:
    """Linear C -> 4C/m, then 2x2 depth-to-space: (N, H, W, C) -> (N, 2H, 2W, C/m)."""

    def __init__(self, store: ParamStore, name: str, channels: int, multiplier: int,
                 rng: np.random.Generator):
        if channels % multiplier:
            raise ValueError(f"{channels} channels not divisible by multiplier {multiplier}")
        self.linear = Linear(store, f"{name}.linear", channels, 4 * channels // multiplier, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return depth_to_space(self.linear(x))


class ConvLayer:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 rng: np.random.Generator, stride: int = 1, pad_mode: str = "zeros"):
        self.weight = store.add(f"{name}.weight", kaiming_normal(rng, (c_out, c_in, k, k)))
        self.bias = store.add(f"{name}.bias", np.zeros(c_out), decay=False)
        self.stride, self.pad, self.pad_mode = stride, k // 2, pad_mode

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad, self.pad_mode)


class Backbone:
    """Stem of two stride-2 convs to H/4, then three stride-2 convs growing channels by m."""

    def __init__(self, store: ParamStore, cfg: HformerConfig, rng: np.random.Generator):
        ch = cfg.stage_channels()
        self.cfg = cfg
        self.stem1 = ConvLayer(store, "backbone.stem1", 1, ch[0], 3, rng, stride=2)
        self.stem2 = ConvLayer(store, "backbone.stem2", ch[0], ch[0], 3, rng, stride=2)
        self.downs = [ConvLayer(store, f"backbone.down{i + 2}", ch[i], ch[i + 1], 3, rng, stride=2)
                      for i in range(3)]

    def __call__(self, x: Tensor) -> list[Tensor]:
        n, c, h, w = x.shape
        if c != 1 or (h, w) != (self.cfg.height, self.cfg.width):
            raise ValueError(f"expected input (N, 1, {self.cfg.height}, {self.cfg.width}), got {x.shape}")
        f = gelu(self.stem2(gelu(self.stem1(x))))
        feats = [f]
        for down in self.downs:
            f = gelu(down(f))
            feats.append(f)
        return feats


class Encoder:
    def __init__(self, store: ParamStore, cfg: HformerConfig, rng: np.random.Generator):
        ch = cfg.stage_channels()
        m = cfg.stage_multiplier
        self.positions = []
        for i in range(4):
            use = cfg.position != "none" and (i == 0 or cfg.position_all_stages)
            self.positions.append(AbsolutePosition(store, f"encoder.pos{i + 1}", ch[i], cfg.stage_size(i))
                                  if use else None)
        self.fuse = [None] + [Linear(store, f"encoder.fuse{i + 1}", ch[i], ch[i], rng) for i in range(1, 4)]
        self.blocks = [[CatBlock(store, f"encoder.stage{i + 1}.block{b + 1}", cfg.block_config(i),
                                 cfg.stage_size(i), rng) for b in range(cfg.blocks_per_stage)]
                       for i in range(4)]
        self.projections = [PatchProjection(store, f"encoder.proj{i + 1}", ch[i], m, rng)
                            for i in range(3)]

    def __call__(self, feats: list[Tensor]) -> list[Tensor]:
        outs = []
        x = None
        for i in range(4):
            f = nchw_to_nhwc(feats[i])
            if self.positions[i] is not None:
                f = self.positions[i](f)
            x = f if i == 0 else ops.add(self.projections[i - 1](x), self.fuse[i](f))
            for block in self.blocks[i]:
                x = block(x)
            outs.append(x)
        return outs


class Decoder:
    """Coarse-to-fine; stage j > 1 expands, concatenates the encoder skip and merges linearly."""

    def __init__(self, store: ParamStore, cfg: HformerConfig, rng: np.random.Generator):
        ch = cfg.stage_channels()
        m = cfg.stage_multiplier
        self.expand = [None] + [PatchExpanding(store, f"decoder.expand{j + 1}", ch[3 - j + 1], m, rng)
                                for j in range(1, 4)]
        self.merge = [None] + [Linear(store, f"decoder.merge{j + 1}", 2 * ch[3 - j], ch[3 - j], rng)
                               for j in range(1, 4)]
        self.blocks = [[CatBlock(store, f"decoder.stage{j + 1}.block{b + 1}", cfg.block_config(3 - j),
                                 cfg.stage_size(3 - j), rng) for b in range(cfg.blocks_per_stage)]
                       for j in range(4)]

    def __call__(self, enc: list[Tensor]) -> list[Tensor]:
        outs = []
        x = enc[3]
        for j in range(4):
            if j:
                up = self.expand[j](x)
                x = self.merge[j](ops.concat([up, enc[3 - j]], axis=-1))
            for block in self.blocks[j]:
                x = block(x)
            outs.append(x)
        return outs

    def zero_skips(self) -> None:
        """Zero the merge rows that read the encoder skip (second half of the concat)."""
        for lin in self.merge[1:]:
            c = lin.weight.shape[1]
            lin.weight.data[c:] = 0


class FpnHead:
    """Resize decoder stages to the finest decoder scale, concatenate, 3x3 conv, resize to input.

    The conv replicates border pixels so constant maps give constant logits.
    """

    def __init__(self, store: ParamStore, cfg: HformerConfig, rng: np.random.Generator):
        ch = cfg.stage_channels()
        self.cfg = cfg
        c_in = sum(ch) if cfg.head_mode == "ifpn" else ch[0]
        self.conv = ConvLayer(store, "head.conv", c_in, cfg.num_classes, 3, rng, pad_mode="edge")

    def __call__(self, dec: list[Tensor]) -> Tensor:
        h, w = self.cfg.stage_size(0)
        if self.cfg.head_mode == "ifpn":
            maps = [bilinear_resize(nhwc_to_nchw(d), h, w) for d in reversed(dec)]
            x = ops.concat(maps, axis=1)
        else:
            x = nhwc_to_nchw(dec[-1])
        logits = self.conv(x)
        return bilinear_resize(logits, self.cfg.height, self.cfg.width)


class Hformer:
    def __init__(self, cfg: HformerConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.params = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.params, cfg, rng)
        self.encoder = Encoder(self.params, cfg, rng)
        self.decoder = Decoder(self.params, cfg, rng)
        self.head = FpnHead(self.params, cfg, rng)

    def cat_blocks(self) -> list[CatBlock]:
        return [b for stage in self.encoder.blocks + self.decoder.blocks for b in stage]

    def zero_branches(self) -> None:
        for block in self.cat_blocks():
            block.zero_branches()

    def as_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.params.dtype))
        if x.ndim == 3:
            x = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
        return x

    def forward(self, x) -> Tensor:
        """Wrapped phase (N, 1, H, W) -> logits (N, K, H, W)."""
        x = ops.mul(self.as_input(x), self.cfg.input_scale)
        return self.head(self.decoder(self.encoder(self.backbone(x))))

    __call__ = forward

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(x).data


def count_parameters(cfg: HformerConfig) -> int:
    """Closed-form parameter count for `cfg`, independent of module construction."""
    cfg.validate()
    ch = cfg.stage_channels()
    m = cfg.stage_multiplier

    def attn(dim, heads, gh, gw):
        n = 2 * (dim * dim + dim)                     # value + output maps
        if gh * gw > 1:
            n += dim * dim + dim + dim * dim          # query (+bias), key (no bias)
            n += (2 * gh - 1) * (2 * gw - 1) * heads
        return n

    def mlp(c):
        hidden = max(1, int(round(c * cfg.mlp_ratio)))
        widths = [c] + [hidden] * (cfg.mlp_layers - 1) + [c]
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    def block(i):
        c, p = ch[i], cfg.stage_patch(i)
        h, w = cfg.stage_size(i)
        return (6 * 2 * c + 2 * attn(c, cfg.num_heads, p, p)
                + attn(p * p, 1, h // p, w // p) + 3 * mlp(c))

    total = 9 * ch[0] + ch[0] + 9 * ch[0] * ch[0] + ch[0]
    total += sum(9 * ch[i] * ch[i + 1] + ch[i + 1] for i in range(3))
    if cfg.position != "none":
        total += 4 if cfg.position_all_stages else 1
    total += sum(c * c + c for c in ch[1:])
    total += sum(8 * ch[i] + 4 * ch[i] * ch[i + 1] + ch[i + 1] for i in range(3))
    total += 2 * cfg.blocks_per_stage * sum(block(i) for i in range(4))
    for i in range(1, 4):
        c_hi, c_lo = ch[i], ch[i - 1]
        out = 4 * c_hi // m
        total += c_hi * out + out + 2 * c_lo * c_lo + c_lo
    c_head = sum(ch) if cfg.head_mode == "ifpn" else ch[0]
    total += 9 * c_head * cfg.num_classes + cfg.num_classes
    return total
