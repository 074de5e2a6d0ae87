"""`hformer` command line: gen-data, train, eval, predict, grad-check.

Exit codes: 0 success, 1 user error (bad config, missing or malformed files,
diverged run), 2 internal error.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import config as C
from .dataset import FormatError, Sample, read_dataset, read_fpm, write_dataset, write_fpm
from .fringe import synthesize_sample
from .inference import Predictor, TtaConfig, predict_fringe_order, unwrap_with_prediction, write_pgm
from .metrics import evaluate

PredictorFactory = Callable[[str, C.RunConfig], tuple[Predictor, tuple[int, int], int]]


class UserError(Exception):
    pass


# -- config plumbing -------------------------------------------------------------

def split_overrides(extra: Sequence[str]) -> dict[str, str]:
    """`--section.key value` or `--section.key=value` pairs."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UserError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UserError(f"missing value for {tok}")
            i += 1
            value = extra[i]
        out[key.replace("-", "_")] = value
        i += 1
    return out


def resolve_config(args, extra: Sequence[str], aliases: dict[str, str] | None = None) -> C.RunConfig:
    overrides = split_overrides(extra)
    for attr, key in (aliases or {}).items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v if isinstance(v, str) else C.format_value(v)
    try:
        return C.resolve(args.preset, args.config, overrides)
    except KeyError as err:
        raise UserError(str(err.args[0] if err.args else err)) from err
    except (ValueError, FileNotFoundError) as err:
        raise UserError(str(err)) from err


def write_resolved(cfg: C.RunConfig, directory: Path) -> None:
    (directory / "config.txt").write_text(cfg.to_text(with_provenance=True))


def parse_split(text: str, count: int) -> list[tuple[str, int]]:
    try:
        parts = [int(p) for p in text.split("/")]
    except ValueError:
        raise UserError(f"split {text!r} must look like 80/10/10") from None
    if len(parts) != 3 or min(parts) < 0 or sum(parts) == 0:
        raise UserError(f"split {text!r} needs three non-negative parts")
    total = sum(parts)
    sizes = [count * p // total for p in parts]
    sizes[0] += count - sum(sizes)
    return list(zip(("train", "val", "test"), sizes))


# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg: C.RunConfig, out: Path, force: bool = False, echo=print) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise UserError(f"{out} exists and is not empty (use --force)")
    plan = parse_split(cfg.data.split, cfg.data.count)
    samples, splits = [], []
    hist = np.zeros(cfg.scene.num_classes, dtype=np.int64)
    index = 0
    for split, n in plan:
        for _ in range(n):
            phase, order = synthesize_sample(cfg.scene, index)
            samples.append(Sample(f"{index:06d}", phase, order))
            splits.append(split)
            hist += np.bincount(order.ravel(), minlength=cfg.scene.num_classes)
            index += 1
    write_dataset(out, samples, splits)
    write_resolved(cfg, out)
    echo(" ".join(f"{s}={n}" for s, n in plan) + f" ({cfg.scene.height}x{cfg.scene.width})")
    echo("label histogram: " + " ".join(f"{k}:{int(v)}" for k, v in enumerate(hist) if v))
    return out


def _load_split(data: str, split: str) -> list[Sample]:
    if not data:
        raise UserError("no dataset given (--data or train.data)")
    try:
        return read_dataset(data, split)
    except FileNotFoundError as err:
        raise UserError(str(err)) from err


def cmd_train(cfg: C.RunConfig, out: Path, resume: str | None = None, echo=print) -> Path:
    from .model import Hformer
    from .training import TrainingDiverged, format_row, load_checkpoint, train

    train_set = _load_split(cfg.train.data, "train")
    if not train_set:
        raise UserError(f"no training samples in {cfg.train.data}")
    val_set = _load_split(cfg.train.data, "val")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    ck = load_checkpoint(resume, expect=cfg.model) if resume else None
    model = Hformer(cfg.model, seed=cfg.train.seed)
    every = max(1, cfg.train.max_iters // 20)
    try:
        res = train(model, cfg.train, train_set, val_set, out, cfg.eval, resume=ck,
                    log=lambda row: echo(format_row(row)) if row["iter"] % every == 0 else None)
    except TrainingDiverged as err:
        raise UserError(f"training diverged: {err}") from err
    echo(f"finished at iteration {res.iteration}; run directory {out}")
    return out


def checkpoint_predictor(path: str, cfg: C.RunConfig):
    """Model from an HFCK file; explicitly configured model keys must match it."""
    from .training import load_checkpoint, model_from_checkpoint

    explicit = any(cfg.source(k) != "default" for k in cfg.keys() if k.startswith("model."))
    model = model_from_checkpoint(load_checkpoint(path, expect=cfg.model if explicit else None))
    return model.predict_logits, (model.cfg.height, model.cfg.width), model.cfg.num_classes


def _tta(cfg: C.RunConfig) -> TtaConfig:
    ev = cfg.eval
    return TtaConfig(ev.hflip, ev.vflip, ev.closure) if ev.tta else TtaConfig(False, False)


def cmd_eval(cfg: C.RunConfig, checkpoint: str, data: str, split: str, out: Path,
             factory: PredictorFactory = checkpoint_predictor, echo=print):
    samples = _load_split(data, split)
    if not samples:
        raise UserError(f"no samples in split {split!r}")
    predictor, window, k = factory(checkpoint, cfg)
    tta = _tta(cfg)
    echo(f"ensemble size {len(tta.members())}")
    preds = [predict_fringe_order(predictor, s.phase, window, cfg.eval.stride_y, cfg.eval.stride_x,
                                  tta, cfg.eval.batch_size) for s in samples]
    report = evaluate(preds, [s.order for s in samples], k, cfg.eval.metric_space)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    write_resolved(cfg, out)
    echo(report.to_text().rstrip())
    return report


def cmd_predict(cfg: C.RunConfig, checkpoint: str, phase_file: str, out: str,
                factory: PredictorFactory = checkpoint_predictor, echo=print) -> list[Path]:
    try:
        phase = read_fpm(phase_file, np.float32)
    except FileNotFoundError as err:
        raise UserError(str(err)) from err
    predictor, window, k = factory(checkpoint, cfg)
    order = predict_fringe_order(predictor, phase, window, cfg.eval.stride_y, cfg.eval.stride_x,
                                 _tta(cfg), cfg.eval.batch_size)
    unwrapped = unwrap_with_prediction(phase, order)
    paths = [Path(f"{out}_order.fpm"), Path(f"{out}_unwrapped.fpm"), Path(f"{out}_order.pgm")]
    paths[0].parent.mkdir(parents=True, exist_ok=True)
    write_fpm(paths[0], order.astype(np.uint8))
    write_fpm(paths[1], unwrapped.astype(np.float32))
    write_pgm(paths[2], order, k)
    echo(" ".join(str(p) for p in paths))
    return paths


def cmd_grad_check(include_model: bool = True, tol: float = 1e-4, echo=print) -> bool:
    from .checks import run_suite

    results = run_suite(include_model=include_model)
    for r in results:
        echo(f"{r.name:<28} max rel err {r.error:.3e}  {'ok' if r.error < tol else 'FAIL'}  ({r.seconds:.1f} s)")
    worst = max(r.error for r in results)
    echo(f"worst {worst:.3e} over {len(results)} checks")
    return worst < tol


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hformer", description="Fringe-order segmentation with Hformer.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--preset", default="toy", choices=["toy", "paper"])
        sp.add_argument("--config", default=None, help="file of 'section.key = value' lines")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--split")
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--max-iters", type=int)
    t.add_argument("--resume")

    def tta_flags(sp):
        sp.add_argument("--hflip", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--vflip", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--closure", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--no-tta", dest="tta", action="store_const", const=False, default=None)

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset split"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    tta_flags(e)

    r = common(sub.add_parser("predict", help="predict fringe orders for one phase map"))
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="wrapped phase FPM (float32)")
    r.add_argument("--out", required=True, help="output prefix")
    tta_flags(r)

    c = sub.add_parser("grad-check", help="finite-difference checks of the autograd engine")
    c.add_argument("--skip-model", action="store_true")
    return p


TTA_ALIASES = {"hflip": "eval.hflip", "vflip": "eval.vflip", "closure": "eval.closure", "tta": "eval.tta"}


def _apply_threads():
    n = os.environ.get("HFORMER_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise UserError(f"HFORMER_THREADS must be an integer, got {n!r}") from None


def run(argv: Sequence[str] | None = None, factory: PredictorFactory = checkpoint_predictor) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    _apply_threads()
    if args.command == "gen-data":
        cfg = resolve_config(args, extra, {"count": "data.count", "split": "data.split", "seed": "scene.seed"})
        cmd_gen_data(cfg, Path(args.out), args.force)
    elif args.command == "train":
        cfg = resolve_config(args, extra, {"data": "train.data", "max_iters": "train.max_iters"})
        cmd_train(cfg, Path(args.out), args.resume)
    elif args.command == "eval":
        cfg = resolve_config(args, extra, TTA_ALIASES)
        cmd_eval(cfg, args.checkpoint, args.data, args.split, Path(args.out), factory)
    elif args.command == "predict":
        cfg = resolve_config(args, extra, TTA_ALIASES)
        cmd_predict(cfg, args.checkpoint, args.input, args.out, factory)
    elif args.command == "grad-check":
        if extra:
            raise UserError(f"unrecognized arguments {extra}")
        return 0 if cmd_grad_check(not args.skip_model) else 1
    return 0


def main(argv: Sequence[str] | None = None, factory: PredictorFactory = checkpoint_predictor) -> int:
    from .training import CheckpointError

    try:
        return run(argv, factory)
    except SystemExit as err:                 # argparse usage errors
        return 0 if err.code in (0, None) else 1
    except (UserError, FormatError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception:                          # noqa: BLE001
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
