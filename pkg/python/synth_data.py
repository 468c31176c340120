"""
Synthetic image-sequence datasets.

bouncing_shapes   - anti-aliased circles / squares moving at constant speed,
                    reflecting elastically off the frame borders
drifting_gradient - a sky-like vertical colour ramp modulated by a smooth
                    luminance wave translating at constant velocity
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import torch

from diffusion import derive_seed
from seqgrid import Sequence

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

KINDS = ("bouncing_shapes", "drifting_gradient")


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "bouncing_shapes"
    n_sequences: int = 16
    n_frames: int = 32
    H: int = 64
    W: int = 64
    n_shapes: int = 2
    speed_range: Tuple[float, float] = (1.0, 3.0)
    radius_range: Tuple[float, float] = (4.0, 8.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown dataset kind '{self.kind}', expected one of {KINDS}")
        if self.n_sequences < 1 or self.n_frames < 1 or self.H < 1 or self.W < 1:
            raise ValueError("n_sequences, n_frames, H and W must be positive")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ValueError(f"Invalid speed range {self.speed_range}")
        if self.kind == "bouncing_shapes":
            if self.n_shapes < 1:
                raise ValueError("bouncing_shapes needs at least one shape")
            r_lo, r_hi = self.radius_range
            if r_lo <= 0 or r_hi < r_lo:
                raise ValueError(f"Invalid radius range {self.radius_range}")
            if min(self.H, self.W) <= 2 * r_hi + 2:
                raise ValueError(f"Frames of {self.H}x{self.W} are too small for radius {r_hi}")


def _reflect(pos: float, vel: float, lo: float, hi: float) -> Tuple[float, float]:
    while pos < lo or pos > hi:
        if pos < lo:
            pos, vel = 2 * lo - pos, -vel
        else:
            pos, vel = 2 * hi - pos, -vel
    return pos, vel


def _coverage(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, radius: float, square: bool) -> np.ndarray:
    # signed distance to the shape boundary, turned into a one-pixel ramp
    if square:
        dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) - radius
    else:
        dist = np.hypot(yy - cy, xx - cx) - radius
    return np.clip(0.5 - dist, 0.0, 1.0)


def bouncing_shapes(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.H, spec.W
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    background = rng.uniform(0.0, 0.2, size=3)

    shapes = []
    for _ in range(spec.n_shapes):
        radius = rng.uniform(*spec.radius_range)
        lo_y, hi_y = radius + 1.0, H - radius - 2.0
        lo_x, hi_x = radius + 1.0, W - radius - 2.0
        speed = rng.uniform(*spec.speed_range)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        shapes.append({
            "radius": radius,
            "square": bool(rng.integers(0, 2)),
            "color": rng.uniform(0.5, 1.0, size=3),
            "pos": [rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)],
            "vel": [speed * np.sin(angle), speed * np.cos(angle)],
            "bounds": ((lo_y, hi_y), (lo_x, hi_x)),
        })

    frames = np.empty((spec.n_frames, 3, H, W), dtype=np.float64)
    for t in range(spec.n_frames):
        frame = np.broadcast_to(background[:, None, None], (3, H, W)).copy()
        for shape in shapes:
            alpha = _coverage(yy, xx, shape["pos"][0], shape["pos"][1], shape["radius"], shape["square"])
            frame = frame * (1.0 - alpha) + shape["color"][:, None, None] * alpha
        frames[t] = frame
        for shape in shapes:
            for axis in (0, 1):
                lo, hi = shape["bounds"][axis]
                shape["pos"][axis], shape["vel"][axis] = _reflect(
                    shape["pos"][axis] + shape["vel"][axis], shape["vel"][axis], lo, hi
                )
    return frames


def drifting_gradient(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.H, spec.W
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    top = np.array([0.25, 0.45, 0.85]) + rng.uniform(-0.1, 0.1, size=3)
    bottom = np.array([0.85, 0.8, 0.7]) + rng.uniform(-0.1, 0.1, size=3)
    ramp = (yy / max(H - 1, 1))[None]
    base = top[:, None, None] * (1.0 - ramp) + bottom[:, None, None] * ramp

    speed = rng.uniform(*spec.speed_range)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    vy, vx = speed * np.sin(angle), speed * np.cos(angle)
    fy, fx = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    frames = np.empty((spec.n_frames, 3, H, W), dtype=np.float64)
    for t in range(spec.n_frames):
        wave = np.sin(2.0 * np.pi * (fy * (yy - vy * t) / H + fx * (xx - vx * t) / W) + phase)
        frames[t] = np.clip(base * (0.8 + 0.2 * wave)[None], 0.0, 1.0)
    return frames


GENERATORS = {"bouncing_shapes": bouncing_shapes, "drifting_gradient": drifting_gradient}


def synth_sequence(spec: SynthSpec, index: int) -> Sequence:
    rng = np.random.default_rng(derive_seed(spec.seed, "synth", spec.kind, index))
    frames = GENERATORS[spec.kind](spec, rng)
    return Sequence(torch.from_numpy(frames).float())


def synth_dataset(spec: SynthSpec, workers: int = 1) -> List[Sequence]:
    """All sequences of the spec; sequence i depends only on (seed, kind, i)."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sequences = list(pool.map(lambda i: synth_sequence(spec, i), range(spec.n_sequences)))
    else:
        sequences = [synth_sequence(spec, i) for i in range(spec.n_sequences)]
    logger.info("Generated %d %s sequences of %d frames (%dx%d)",
                len(sequences), spec.kind, spec.n_frames, spec.H, spec.W)
    return sequences
