"""Overfit the toy Hformer on a handful of synthetic scenes and report training accuracy.

    python3 scripts/overfit.py --samples 8 --iters 2000 --out runs/overfit
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from hformer.config import preset
from hformer.dataset import Sample
from hformer.fringe import synthesize_sample
from hformer.metrics import miou
from hformer.model import Hformer
from hformer.training import save_checkpoint, train


def training_scores(model: Hformer, samples) -> tuple[float, float]:
    x = np.stack([s.phase for s in samples])[:, None]
    pred = np.concatenate([model.predict_logits(x[i:i + 4]).argmax(axis=1) for i in range(0, len(x), 4)])
    gt = np.stack([s.order for s in samples])
    return float(np.mean(pred == gt)), miou(pred, gt, model.cfg.num_classes)


def run(samples: int = 8, iters: int = 2000, lr: float | None = None, batch: int | None = None,
        seed: int = 0, out: str | None = None, report_every: int = 100, log=print) -> dict:
    cfg = preset("toy")
    cfg.train.max_iters = iters
    cfg.train.seed = seed
    cfg.train.checkpoint_interval = 0
    if lr is not None:
        cfg.train.initial_lr = lr
    if batch is not None:
        cfg.train.batch_size = batch
    data = [Sample(f"s{i:03d}", *synthesize_sample(cfg.scene, i)) for i in range(samples)]
    model = Hformer(cfg.model, seed=seed)
    start = time.time()
    history = []
    done = 0
    while done < iters:
        stop = min(iters, done + report_every)
        res = train(model, cfg.train, data, stop_at=stop,
                    resume=None if done == 0 else _resume(model, res, done, seed))
        done = stop
        acc, m = training_scores(model, data)
        history.append({"iter": done, "loss": res.rows[-1]["loss"], "acc": acc, "miou": m,
                        "seconds": round(time.time() - start, 1)})
        log(json.dumps(history[-1]))
    result = {"accuracy": history[-1]["acc"], "miou": history[-1]["miou"],
              "seconds": time.time() - start, "history": history}
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        Path(out, "overfit.json").write_text(json.dumps(result, indent=1))
        save_checkpoint(Path(out, "final.hfck"), _resume(model, res, done, seed))
    return result


def _resume(model, res, done, seed):
    from hformer.training import Checkpoint
    return Checkpoint.capture(model, res.optimizer, done, seed)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-every", type=int, default=100)
    p.add_argument("--out", default=None)
    a = p.parse_args(argv)
    r = run(a.samples, a.iters, a.lr, a.batch, a.seed, a.out, a.report_every)
    print(f"final accuracy {r['accuracy']:.4f}  mIoU {r['miou']:.4f}  ({r['seconds']:.0f} s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
