"""SGD training loop, poly schedule, flip/crop augmentation and HFCK checkpoints."""

from __future__ import annotations

import csv
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import EvalConfig, TrainConfig, config_hash, model_config_from_text, model_config_text
from .dataset import Sample
from .inference import TtaConfig, predict_fringe_order
from .metrics import evaluate
from .model import Hformer, HformerConfig
from .numerics import Tensor, backward, cross_entropy
from .params import ParamStore

__all__ = [
    "Checkpoint", "CheckpointError", "SGD", "TrainingDiverged", "TrainResult", "augment",
    "cross_entropy", "decode_checkpoint", "encode_checkpoint", "four_crops", "load_checkpoint",
    "poly_lr", "save_checkpoint", "train", "METRIC_COLUMNS",
]

METRIC_COLUMNS = ("iter", "lr", "loss", "val_miou", "val_mse", "val_mae")


def poly_lr(t: int, cfg: TrainConfig) -> float:
    if cfg.max_iters < 1:
        raise ValueError("poly_lr needs max_iters >= 1")
    if not 0 <= t <= cfg.max_iters:
        raise ValueError(f"iteration {t} outside [0, {cfg.max_iters}]")
    return cfg.initial_lr * (1.0 - t / cfg.max_iters) ** cfg.poly_power


class SGD:
    """Momentum SGD with coupled L2 decay; parameters flagged decay=False are exempt."""

    def __init__(self, params: ParamStore, momentum: float = 0.9, weight_decay: float = 0.01):
        self.params = params
        self.momentum, self.weight_decay = momentum, weight_decay
        self.buffers = OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items())

    def step(self, lr: float) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
            grads[name] = g
        for name, p in self.params.items():
            g = grads[name]
            v = self.buffers[name]
            if self.weight_decay and self.params.decays(name):
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


# -- augmentation ----------------------------------------------------------------

def augment(phase: np.ndarray, order: np.ndarray, rng: np.random.Generator,
            crop: tuple[int, int] | None = None, hflip: bool = True, vflip: bool = True):
    """Random crop, then independent column/row flips with probability 1/2 each, applied to both maps."""
    if phase.shape != order.shape:
        raise ValueError("phase and label maps differ in shape")
    h, w = phase.shape
    ch, cw = crop if crop is not None else (h, w)
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
    r = int(rng.integers(0, h - ch + 1))
    c = int(rng.integers(0, w - cw + 1))
    phase, order = phase[r:r + ch, c:c + cw], order[r:r + ch, c:c + cw]
    flip_h = hflip and rng.random() < 0.5
    flip_v = vflip and rng.random() < 0.5
    if flip_h:
        phase, order = phase[:, ::-1], order[:, ::-1]
    if flip_v:
        phase, order = phase[::-1], order[::-1]
    return np.ascontiguousarray(phase), np.ascontiguousarray(order)


def four_crops(phase: np.ndarray, order: np.ndarray, crop: tuple[int, int]):
    """Corner-anchored, partially overlapping 2x2 tiling of a full image."""
    h, w = phase.shape
    ch, cw = crop
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
    return [(phase[r:r + ch, c:c + cw].copy(), order[r:r + ch, c:c + cw].copy())
            for r in (0, h - ch) for c in (0, w - cw)]


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"HFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: HformerConfig
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, model: Hformer, opt: SGD | None, iteration: int, seed: int) -> "Checkpoint":
        return cls(model.cfg, model.params.state(),
                   OrderedDict((k, v.copy()) for k, v in opt.buffers.items()) if opt else OrderedDict(),
                   iteration, {"seed": seed, "stream": "per-iteration", "iteration": iteration})


def encode_checkpoint(ck: Checkpoint) -> bytes:
    text = model_config_text(ck.config) + f"config_hash = {config_hash(ck.config)}\n"
    blob = text.encode("utf-8")
    tensors = list(ck.params.items()) + [(f"opt.{k}", v) for k, v in ck.buffers.items()]
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints store float32, got {arr.dtype}")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    rng = json.dumps(ck.rng_state, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<Q", ck.iteration) + struct.pack("<I", len(rng)) + rng)
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes, expect: HformerConfig | None = None) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an HFCK checkpoint")
    version, n_text = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    text = r.take(n_text).decode("utf-8")
    body, _, stored_hash = text.rpartition("config_hash = ")
    cfg = model_config_from_text(body)
    if stored_hash.strip() != config_hash(cfg):
        raise CheckpointError("config hash does not match the stored config text")
    if expect is not None and config_hash(expect) != config_hash(cfg):
        raise CheckpointError("checkpoint was written for a different model config")
    (count,) = r.unpack("<I")
    params, buffers = OrderedDict(), OrderedDict()
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        if name.startswith("opt."):
            buffers[name[4:]] = arr
        else:
            params[name] = arr
    (iteration,) = r.unpack("<Q")
    (n_rng,) = r.unpack("<I")
    rng_state = json.loads(r.take(n_rng).decode("utf-8"))
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(cfg, params, buffers, iteration, rng_state)


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect: HformerConfig | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expect)


def model_from_checkpoint(ck: Checkpoint) -> Hformer:
    model = Hformer(ck.config)
    model.params.load_state(ck.params)
    return model


# -- training loop ---------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    rows: list[dict]
    checkpoints: list[Path]
    iteration: int
    optimizer: SGD


def batch_indices(t: int, batch_size: int, n: int, seed: int) -> list[int]:
    """Sample indices for iteration t: a seeded permutation per epoch, read sequentially."""
    out = []
    for j in range(batch_size):
        pos = t * batch_size + j
        epoch, k = divmod(pos, n)
        out.append(int(np.random.default_rng([seed, epoch]).permutation(n)[k]))
    return out


def make_batch(samples: Sequence[Sample], t: int, cfg: TrainConfig, crop: tuple[int, int]):
    idx = batch_indices(t, cfg.batch_size, len(samples), cfg.seed)
    xs, ys = [], []
    for j, i in enumerate(idx):
        rng = np.random.default_rng([cfg.seed, 1, t, j])
        x, y = augment(samples[i].phase, samples[i].order, rng, crop, cfg.hflip, cfg.vflip)
        xs.append(x)
        ys.append(y)
    return np.stack(xs)[:, None].astype(np.float32), np.stack(ys).astype(np.int64)


def validate_model(model: Hformer, samples: Sequence[Sample], ev: EvalConfig):
    window = (model.cfg.height, model.cfg.width)
    tta = TtaConfig(ev.hflip, ev.vflip, ev.closure) if ev.tta else TtaConfig(False, False)
    preds = [predict_fringe_order(model.predict_logits, s.phase, window, ev.stride_y, ev.stride_x,
                                  tta, ev.batch_size) for s in samples]
    return evaluate(preds, [s.order for s in samples], model.cfg.num_classes, ev.metric_space)


def format_row(row: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in row.items())


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metric_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])


def read_metric_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (None if v == "" else int(v) if k == "iter" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


def train(model: Hformer, cfg: TrainConfig, train_set: Sequence[Sample],
          val_set: Sequence[Sample] = (), run_dir=None, eval_cfg: EvalConfig | None = None,
          resume: Checkpoint | None = None, stop_at: int | None = None,
          log: Callable[[dict], None] | None = None) -> TrainResult:
    """Run SGD from `resume` (or from the model's current weights) up to `stop_at` or max_iters.

    Checkpoints `ckpt_<iter>.hfck` and `metrics.csv` go to `run_dir` when given.
    """
    cfg.validate()
    if not train_set:
        raise ValueError("training set is empty")
    eval_cfg = eval_cfg or EvalConfig()
    run_dir = Path(run_dir) if run_dir is not None else None
    opt = SGD(model.params, cfg.momentum, cfg.weight_decay)
    start, rows = 0, []
    if resume is not None:
        if config_hash(resume.config) != config_hash(model.cfg):
            raise CheckpointError("resume checkpoint was written for a different model config")
        model.params.load_state(resume.params)
        if resume.buffers:
            for k, v in resume.buffers.items():
                opt.buffers[k][...] = v
        start = resume.iteration
        if run_dir is not None and (run_dir / "metrics.csv").exists():
            rows = [r for r in read_metric_log(run_dir / "metrics.csv") if r["iter"] <= start]
    end = cfg.max_iters if stop_at is None else min(stop_at, cfg.max_iters)
    crop = (model.cfg.height, model.cfg.width)
    ignore = None if cfg.ignore_index < 0 else cfg.ignore_index
    checkpoints: list[Path] = []

    def checkpoint(it: int, name: str | None = None) -> None:
        if run_dir is not None:
            ck = Checkpoint.capture(model, opt, it, cfg.seed)
            checkpoints.append(save_checkpoint(run_dir / (name or f"ckpt_{it:06d}.hfck"), ck))

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    if start == 0 and end == 0:
        checkpoint(0)
    for t in range(start, end):
        lr = poly_lr(t, cfg)
        x, y = make_batch(train_set, t, cfg, crop)
        model.params.zero_grad()
        try:
            loss = cross_entropy(model(Tensor(x)), y, ignore_index=ignore)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError("loss is not finite")
            backward(loss)
            opt.step(lr)
        except FloatingPointError as err:
            checkpoint(t, "last_good.hfck")
            if run_dir is not None:
                write_metric_log(run_dir / "metrics.csv", rows)
            raise TrainingDiverged(f"iteration {t + 1}: {err}; last good state kept at iteration {t}") from err
        row = {"iter": t + 1, "lr": lr, "loss": value}
        last = t + 1 == cfg.max_iters
        if val_set and ((cfg.eval_interval and (t + 1) % cfg.eval_interval == 0) or last):
            rep = validate_model(model, val_set, eval_cfg)
            row.update(val_miou=rep.miou, val_mse=rep.mse, val_mae=rep.mae)
        rows.append(row)
        if log:
            log(row)
        if (cfg.checkpoint_interval and (t + 1) % cfg.checkpoint_interval == 0) or t + 1 == end:
            checkpoint(t + 1)
            if run_dir is not None:
                write_metric_log(run_dir / "metrics.csv", rows)
    if run_dir is not None:
        write_metric_log(run_dir / "metrics.csv", rows)
    return TrainResult(rows, checkpoints, max(start, end), opt)
