"""Synthetic fringe-projection scenes, phase-shifting extraction and fringe orders.

Phase maps are plain float64 arrays of shape (H, W); fringe orders are integer
arrays of the same shape.  Wrapped phase lives in (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass
class SceneConfig:
    height: int = 128
    width: int = 128
    carrier_slope: float = 0.3         # radians per pixel along x
    tilt: float = 0.05                 # max |plane slope| along y, radians per pixel
    blob_count: tuple[int, int] = (0, 4)
    blob_amplitude: tuple[float, float] = (2.0, 12.0)
    blob_width: tuple[float, float] = (6.0, 24.0)
    k_range: tuple[int, int] = (0, 33)
    num_classes: int = 34
    intensity_bias: float = 128.0      # A
    modulation: float = 100.0          # B_mod
    steps: int = 3                     # N
    noise_sigma: float = 0.0
    offset_jitter: float = 1.0         # fraction of the spare phase range used for a random offset
    seed: int = 0

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("scene size must be positive")
        if self.steps < 3:
            raise ValueError("phase shifting needs at least 3 steps")
        if self.modulation <= 0:
            raise ValueError("modulation depth must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        lo, hi = self.k_range
        if not (0 <= lo <= hi <= self.num_classes - 1):
            raise ValueError(f"k_range {self.k_range} not inside [0, {self.num_classes - 1}]")
        if self.blob_count[0] < 0 or self.blob_count[0] > self.blob_count[1]:
            raise ValueError(f"bad blob_count {self.blob_count}")
        if self.blob_width[0] <= 0:
            raise ValueError("blob widths must be positive")
        if not 0.0 <= self.offset_jitter <= 1.0:
            raise ValueError("offset_jitter must be in [0, 1]")


def generate_scene(cfg: SceneConfig, seed: int | None = None) -> np.ndarray:
    """Absolute phase: carrier ramp + plane tilt + Gaussian bumps, placed in k_range.

    If the raw phase spans more fringes than `k_range` allows it is compressed
    linearly; otherwise it is only offset, by a random amount within
    `offset_jitter` of the slack.  With jitter 0 the lowest pixel sits in order
    k_range[0], so fringe orders follow from the fringe geometry alone.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    phi = cfg.carrier_slope * xx
    if cfg.tilt > 0:
        phi = phi + rng.uniform(-cfg.tilt, cfg.tilt) * yy
    n_blobs = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    for _ in range(n_blobs):
        amp = rng.uniform(*cfg.blob_amplitude) * rng.choice([-1.0, 1.0])
        sigma = rng.uniform(*cfg.blob_width)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        phi = phi + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))

    # strictly above -pi so the smallest fringe order is never k_lo - 1
    lo = TWO_PI * cfg.k_range[0] - math.pi
    hi = TWO_PI * cfg.k_range[1] + math.pi
    margin = 1e-6 * (hi - lo)
    room = (hi - lo) - 2 * margin
    pmin = phi.min()
    span = phi.max() - pmin
    if not math.isfinite(span):
        raise ValueError("scene produced non-finite phase")
    if span > room:
        phi = (phi - pmin) * (room / span)
        span = room
        pmin = 0.0
    start = lo + margin + rng.uniform(0.0, 1.0) * cfg.offset_jitter * (room - span)
    return phi - pmin + start


def render_fringes(phi: np.ndarray, cfg: SceneConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """N phase-shifted fringe images, shape (N, H, W)."""
    if cfg.steps < 3:
        raise ValueError("phase shifting needs at least 3 steps")
    shifts = TWO_PI * np.arange(cfg.steps) / cfg.steps
    imgs = cfg.intensity_bias + cfg.modulation * np.cos(phi[None] - shifts[:, None, None])
    if cfg.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        imgs = imgs + rng.normal(0.0, cfg.noise_sigma, size=imgs.shape)
    return imgs


def extract_wrapped_phase(images: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """N-step phase shifting: returns (wrapped phase in (-pi, pi], validity mask).

    Pixels where both weighted sums vanish carry no phase; they are set to 0 and
    marked invalid.
    """
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n < 3:
        raise ValueError("phase shifting needs at least 3 images")
    shifts = TWO_PI * np.arange(n) / n
    num = np.tensordot(np.sin(shifts), images, axes=1)
    den = np.tensordot(np.cos(shifts), images, axes=1)
    scale = max(1.0, float(np.abs(images).max(initial=0.0))) * n
    valid = np.hypot(num, den) > tol * scale
    phase = np.arctan2(num, den)
    phase = np.where(phase <= -math.pi, math.pi, phase)
    return np.where(valid, phase, 0.0), valid


def wrap(phi_abs: np.ndarray, num_classes: int = 34) -> tuple[np.ndarray, np.ndarray]:
    """Split absolute phase into (wrapped phase, fringe order) with phase + 2*pi*k = phi_abs."""
    phi_abs = np.asarray(phi_abs, dtype=np.float64)
    k = np.ceil((phi_abs - math.pi) / TWO_PI)
    wrapped = phi_abs - TWO_PI * k
    # rounding can leave the residual a hair outside (-pi, pi]
    low = wrapped <= -math.pi
    high = wrapped > math.pi
    k = k - low + high
    wrapped = np.where(low | high, phi_abs - TWO_PI * k, wrapped)
    if k.size and (k.min() < 0 or k.max() > num_classes - 1):
        raise ValueError(f"fringe order outside [0, {num_classes - 1}]: "
                         f"range [{int(k.min())}, {int(k.max())}]")
    return wrapped, k.astype(np.int64)


def unwrap(wrapped: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Absolute phase = wrapped + 2*pi*k."""
    wrapped = np.asarray(wrapped)
    k = np.asarray(k)
    if wrapped.shape != k.shape:
        raise ValueError(f"shape mismatch: phase {wrapped.shape} vs order {k.shape}")
    return wrapped.astype(np.float64) + TWO_PI * k.astype(np.float64)


def synthesize_sample(cfg: SceneConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (wrapped phase float32, fringe order uint8) pair; stream seeded by (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    phi = generate_scene(cfg, seed=int(rng.integers(2**63)))
    images = render_fringes(phi, cfg, rng)
    phase, _ = extract_wrapped_phase(images)
    _, k = wrap(phi, cfg.num_classes)
    return phase.astype(np.float32), k.astype(np.uint8)
