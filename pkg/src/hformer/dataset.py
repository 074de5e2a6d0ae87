"""FPM array files and on-disk datasets of (wrapped phase, fringe order) pairs.

FPM layout (little-endian): b"FPM1", u8 dtype code (0 = f32, 1 = u8),
u32 height, u32 width, then the row-major payload.  A dataset directory holds
`<id>_phase.fpm` / `<id>_order.fpm` pairs and `manifest.txt` with one
"<id> <split>" line per sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FPM_MAGIC = b"FPM1"
_HEADER = struct.Struct("<4sBII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
MANIFEST = "manifest.txt"


class FormatError(ValueError):
    """Malformed or unexpected file contents."""


def encode_fpm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"FPM stores 2-d maps, got shape {arr.shape}")
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"FPM supports float32 and uint8, got {arr.dtype}")
    h, w = arr.shape
    return _HEADER.pack(FPM_MAGIC, code, h, w) + arr.astype(_DTYPES[code], copy=False).tobytes()


def decode_fpm(blob: bytes, expect_dtype=None) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated FPM header")
    magic, code, h, w = _HEADER.unpack_from(blob)
    if magic != FPM_MAGIC:
        raise FormatError(f"bad FPM magic {magic!r}")
    if code not in _DTYPES:
        raise FormatError(f"unknown FPM dtype code {code}")
    dtype = _DTYPES[code]
    if expect_dtype is not None and dtype != np.dtype(expect_dtype):
        raise FormatError(f"FPM dtype {dtype} where {np.dtype(expect_dtype)} was expected")
    need = h * w * dtype.itemsize
    payload = blob[_HEADER.size:]
    if len(payload) != need:
        raise FormatError(f"FPM payload is {len(payload)} bytes, header implies {need}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(dtype.newbyteorder("="))


def write_fpm(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_fpm(arr))


def read_fpm(path, expect_dtype=None) -> np.ndarray:
    return decode_fpm(Path(path).read_bytes(), expect_dtype)


@dataclass
class Sample:
    id: str
    phase: np.ndarray   # float32 (H, W), wrapped phase
    order: np.ndarray   # uint8 (H, W), fringe order


def write_dataset(root, samples: list[Sample], splits: list[str]) -> None:
    root = Path(root)
    if len(samples) != len(splits):
        raise ValueError("one split name per sample required")
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s, split in zip(samples, splits):
        if " " in s.id or " " in split:
            raise ValueError("ids and split names may not contain spaces")
        write_fpm(root / f"{s.id}_phase.fpm", np.asarray(s.phase, dtype=np.float32))
        write_fpm(root / f"{s.id}_order.fpm", np.asarray(s.order, dtype=np.uint8))
        lines.append(f"{s.id} {split}\n")
    (root / MANIFEST).write_text("".join(lines))


def read_manifest(root) -> list[tuple[str, str]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected '<id> <split>'")
        rows.append((parts[0], parts[1]))
    return rows


def read_dataset(root, split: str | None = None) -> list[Sample]:
    root = Path(root)
    out = []
    for sid, sp in read_manifest(root):
        if split is not None and sp != split:
            continue
        phase = read_fpm(root / f"{sid}_phase.fpm", np.float32)
        order = read_fpm(root / f"{sid}_order.fpm", np.uint8)
        if phase.shape != order.shape:
            raise FormatError(f"{sid}: phase {phase.shape} and order {order.shape} differ")
        out.append(Sample(sid, phase, order))
    return out
