"""Show the sliding-window plan for the published 480x640 setting and check fusion.

    python3 scripts/tiling_demo.py
"""

from __future__ import annotations

import numpy as np

from hformer.inference import plan_tiles, tiled_probs


def main() -> int:
    for h, w in [(480, 640), (500, 640)]:
        grid = plan_tiles(h, w, 384, 96, 256)
        print(f"{h}x{w}: rows {grid.rows} cols {grid.cols} -> {len(grid)} tiles")
        hits = np.zeros((h, w), dtype=np.int64)
        for r, c in grid.origins:
            hits[r:r + 384, c:c + 384] += 1
        print(f"  tiles per pixel: min {hits.min()} max {hits.max()}")

    rng = np.random.default_rng(0)
    a, b = rng.normal(size=4), rng.normal(size=4)

    def stub(x):
        return a[None, :, None, None] * x + b[None, :, None, None]

    img = rng.uniform(-np.pi, np.pi, size=(480, 640))
    z = stub(img[None, None])[0].transpose(1, 2, 0)
    direct = np.exp(z - z.max(-1, keepdims=True))
    direct /= direct.sum(-1, keepdims=True)
    fused = tiled_probs(stub, img, 384, 96, 256)
    print(f"1x1 stub, fused vs direct: max abs diff {np.abs(fused - direct).max():.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
