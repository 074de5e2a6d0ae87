"""Run configuration: dotted `section.key = value` files, presets and provenance.

Precedence is flag > file > default.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .fringe import SceneConfig
from .model import HformerConfig


@dataclass
class TrainConfig:
    initial_lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 0.01
    poly_power: float = 0.9
    max_iters: int = 40000
    batch_size: int = 4
    hflip: bool = True
    vflip: bool = True
    seed: int = 0
    checkpoint_interval: int = 1000
    eval_interval: int = 0          # 0: validate only at the end
    ignore_index: int = -1          # -1: every pixel contributes
    data: str = ""

    def validate(self) -> None:
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.initial_lr < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be >= 0")


@dataclass
class EvalConfig:
    stride_y: int = 96
    stride_x: int = 256
    hflip: bool = True
    vflip: bool = True
    closure: bool = False
    tta: bool = True
    batch_size: int = 4
    metric_space: str = "order"     # "order" or "phase" (x 2*pi)


@dataclass
class DataConfig:
    count: int = 100
    split: str = "80/10/10"


SECTIONS = {"scene": SceneConfig, "model": HformerConfig, "train": TrainConfig,
            "eval": EvalConfig, "data": DataConfig}


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: HformerConfig = field(default_factory=HformerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    provenance: dict[str, str] = field(default_factory=dict)

    def keys(self) -> list[str]:
        return [f"{s}.{f.name}" for s in SECTIONS for f in dataclasses.fields(getattr(self, s))]

    def get(self, key: str):
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, raw, source: str) -> None:
        section, name = _split_key(key)
        obj = getattr(self, section)
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        value = parse_value(raw, current, key) if isinstance(raw, str) else raw
        setattr(obj, name, value)
        self.provenance[key] = source

    def source(self, key: str) -> str:
        return self.provenance.get(key, "default")

    def to_text(self, sections=None, with_provenance: bool = False) -> str:
        lines = []
        for key in self.keys():
            if sections and key.split(".")[0] not in sections:
                continue
            line = f"{key} = {format_value(self.get(key))}"
            if with_provenance:
                line += f"  # {self.source(key)}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        self.scene.validate()
        self.model.validate()
        self.train.validate()
        if self.eval.metric_space not in ("order", "phase"):
            raise ValueError("eval.metric_space must be 'order' or 'phase'")


def _split_key(key: str) -> tuple[str, str]:
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise KeyError(f"unknown config key {key!r}")
    return parts[0], parts[1]


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_value(text: str, current, key: str):
    if isinstance(current, tuple) or (current is None and key == "model.patch_sizes"):
        if text.strip().lower() == "none":
            return None
        items = [s for s in text.replace("(", "").replace(")", "").split(",") if s.strip()]
        template = current if current else (0,) * len(items)
        if isinstance(current, tuple) and len(current) and len(items) != len(current) and key != "model.patch_sizes":
            raise ValueError(f"{key}: expected {len(current)} values, got {len(items)}")
        return tuple(_parse_scalar(s, template[min(i, len(template) - 1)], key) for i, s in enumerate(items))
    return _parse_scalar(text, current, key)


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{origin}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def preset(name: str) -> RunConfig:
    """`toy` is the desk-scale acceptance setting; `paper` mirrors the published recipe."""
    cfg = RunConfig()
    if name == "toy":
        values = {
            "scene.height": 64, "scene.width": 64, "scene.carrier_slope": 0.25, "scene.tilt": 0.03,
            "scene.blob_count": (0, 2), "scene.blob_amplitude": (1.0, 5.0),
            "scene.blob_width": (8.0, 20.0), "scene.k_range": (0, 7), "scene.num_classes": 8,
            "scene.offset_jitter": 0.0,
            "model.height": 64, "model.width": 64, "model.base_channels": 8,
            "model.stage_multiplier": 4, "model.blocks_per_stage": 1, "model.num_classes": 8,
            "train.initial_lr": 0.004, "train.batch_size": 2, "train.max_iters": 2000,
            "train.hflip": False, "train.vflip": False, "train.checkpoint_interval": 500,
            "eval.stride_y": 32, "eval.stride_x": 32, "data.count": 10, "data.split": "8/1/1",
        }
    elif name == "paper":
        values = {
            "scene.height": 480, "scene.width": 640, "scene.carrier_slope": 0.3,
            "scene.k_range": (0, 33), "scene.num_classes": 34,
            "model.height": 384, "model.width": 384, "model.base_channels": 16,
            "model.stage_multiplier": 4, "model.blocks_per_stage": 1, "model.num_classes": 34,
            "train.max_iters": 40000, "train.batch_size": 4,
            "eval.stride_y": 96, "eval.stride_x": 256, "data.count": 1000, "data.split": "856/72/72",
        }
    else:
        raise KeyError(f"unknown preset {name!r} (choose 'toy' or 'paper')")
    for k, v in values.items():
        cfg.set(k, v, "default")
    return cfg


def resolve(preset_name: str = "toy", config_file: str | Path | None = None,
            overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = preset(preset_name)
    if config_file is not None:
        path = Path(config_file)
        for k, v in parse_config_text(path.read_text(), str(path)).items():
            cfg.set(k, v, "file")
    for k, v in (overrides or {}).items():
        cfg.set(k, v, "flag")
    cfg.validate()
    return cfg


def model_config_text(cfg: HformerConfig) -> str:
    return "".join(f"model.{k} = {format_value(v)}\n"
                   for k, v in ((f.name, getattr(cfg, f.name)) for f in dataclasses.fields(cfg)))


def model_config_from_text(text: str) -> HformerConfig:
    cfg = RunConfig()
    for k, v in parse_config_text(text).items():
        if k.startswith("model."):
            cfg.set(k, v, "file")
    return cfg.model


def config_hash(cfg: HformerConfig) -> str:
    return hashlib.sha256(model_config_text(cfg).encode()).hexdigest()
