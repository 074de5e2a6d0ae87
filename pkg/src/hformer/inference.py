"""Sliding-window prediction with overlap averaging and flip test-time augmentation.

A predictor is any callable mapping a float batch (N, 1, h, w) to logits
(N, K, h, w); `Hformer.predict_logits` is one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .fringe import unwrap

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    window: tuple[int, int]
    strides: tuple[int, int]
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.rows for c in self.cols]

    def __len__(self) -> int:
        return len(self.rows) * len(self.cols)


def _axis_origins(dim: int, w: int, s: int) -> tuple[int, ...]:
    if w > dim:
        raise ValueError(f"window {w} larger than image extent {dim}")
    if s < 1 or (s > w and w < dim):      # a full-extent window is one tile at any stride
        raise ValueError(f"stride {s} must be in [1, window {w}], or pixels go uncovered")
    out = [o for o in range(0, dim, s) if o + w < dim]
    if not out or out[-1] + w < dim:
        out.append(dim - w)
    return tuple(out)


def plan_tiles(height: int, width: int, window, stride_y: int, stride_x: int) -> TileGrid:
    """Origins 0, s, 2s, ... while origin + w < dim, then a final window flush with the edge."""
    wh, ww = (window, window) if np.isscalar(window) else tuple(window)
    return TileGrid(height, width, (int(wh), int(ww)), (stride_y, stride_x),
                    _axis_origins(height, wh, stride_y), _axis_origins(width, ww, stride_x))


def softmax_np(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def fuse_tiles(grid: TileGrid, tile_probs) -> np.ndarray:
    """Per-pixel mean of the covering tiles' (K, wh, ww) maps -> (H, W, K).

    Running-mean update m += (p - m) / n, so equal tiles fuse to exactly that value.
    """
    tile_probs = list(tile_probs)
    if len(tile_probs) != len(grid):
        raise ValueError(f"{len(grid)} tiles planned, {len(tile_probs)} given")
    wh, ww = grid.window
    k = tile_probs[0].shape[0]
    acc = np.zeros((grid.height, grid.width, k), dtype=np.float64)
    count = np.zeros((grid.height, grid.width, 1), dtype=np.float64)
    for (r, c), p in zip(grid.origins, tile_probs):
        if p.shape != (k, wh, ww):
            raise ValueError(f"tile map shape {p.shape} != {(k, wh, ww)}")
        view = acc[r:r + wh, c:c + ww]
        n = count[r:r + wh, c:c + ww]
        n += 1
        view += (np.moveaxis(p, 0, -1) - view) / n
    assert count.min() >= 1, "uncovered pixel"
    return acc


def tiled_probs(model: Predictor, image: np.ndarray, window, stride_y: int, stride_x: int,
                batch_size: int = 4) -> np.ndarray:
    """Class probabilities (H, W, K) for a single (H, W) phase image."""
    h, w = image.shape
    grid = plan_tiles(h, w, window, stride_y, stride_x)
    wh, ww = grid.window
    crops = [image[r:r + wh, c:c + ww] for r, c in grid.origins]
    probs = []
    for i in range(0, len(crops), batch_size):
        batch = np.stack(crops[i:i + batch_size])[:, None]
        probs.extend(softmax_np(np.asarray(model(batch), dtype=np.float64), axis=1))
    return fuse_tiles(grid, probs)


@dataclass
class TtaConfig:
    hflip: bool = True
    vflip: bool = True
    closure: bool = False     # add the combined flip so the ensemble is a group

    def members(self) -> list[tuple[bool, bool]]:
        """(flip rows?, flip cols?) pairs; identity first."""
        out = [(False, False)]
        if self.hflip:
            out.append((False, True))
        if self.vflip:
            out.append((True, False))
        if self.closure and self.hflip and self.vflip:
            out.append((True, True))
        return out


def _flip(a: np.ndarray, rows: bool, cols: bool) -> np.ndarray:
    if rows:
        a = a[::-1]
    if cols:
        a = a[:, ::-1]
    return np.ascontiguousarray(a)


def tta_predict(model: Predictor, image: np.ndarray, window, stride_y: int, stride_x: int,
                tta: TtaConfig | None = None, batch_size: int = 4) -> np.ndarray:
    """Mean over flip members g of g^-1(tiled_probs(g(image))), as (H, W, K)."""
    members = (tta or TtaConfig(False, False)).members()
    total = None
    for rows, cols in members:
        p = tiled_probs(model, _flip(image, rows, cols), window, stride_y, stride_x, batch_size)
        p = _flip(p, rows, cols)
        total = p if total is None else total + p
    return total / len(members)


def predict_fringe_order(model: Predictor, phase: np.ndarray, window, stride_y: int, stride_x: int,
                         tta: TtaConfig | None = None, batch_size: int = 4) -> np.ndarray:
    """Argmax class per pixel; ties go to the smaller class index."""
    probs = tta_predict(model, phase, window, stride_y, stride_x, tta, batch_size)
    k = np.argmax(probs, axis=-1)
    return k.astype(np.uint8 if probs.shape[-1] <= 256 else np.int64)


def unwrap_with_prediction(phase: np.ndarray, k: np.ndarray) -> np.ndarray:
    return unwrap(phase, k)


def order_to_pgm(k: np.ndarray, num_classes: int) -> bytes:
    """8-bit binary PGM with grey level round(k * 255 / (K - 1))."""
    k = np.asarray(k)
    if k.ndim != 2:
        raise ValueError("PGM export needs a 2-D map")
    grey = np.rint(k.astype(np.float64) * (255.0 / (num_classes - 1))).astype(np.uint8)
    h, w = k.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + grey.tobytes()


def write_pgm(path, k: np.ndarray, num_classes: int) -> None:
    Path(path).write_bytes(order_to_pgm(k, num_classes))
