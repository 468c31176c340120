"""
Grid-wise denoising of noisy volumes / frame sequences with the Stage-1
prior, optionally refined per frame by Stage 2.

Two modes:
  literal - loop over every sampling step, renoise the noisy input to the
            level of the next step and take one reverse step from there;
            only the last iteration reaches the output
  sdedit  - noise the input once to level t_star, then run the ordinary
            reverse chain down to 1
"""
import logging
from dataclasses import dataclass
from typing import Optional

import torch

from denoiser import DenoiserModel, IdentityCodec, LatentCodec, denoise_forward
from diffusion import (
    NoiseSchedule,
    derive_seed,
    make_generator,
    noise_to_level,
    reverse_step,
    step_noise,
)
from seqgrid import GridImage, GridLayout, Sequence, assemble_grid_sequence, pack_grid, resample_frame, window_starts
from sr_stage import refine_sequence

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

MODES = ("literal", "sdedit")


@dataclass
class NoisyVolume:
    frames: Sequence
    assumed_noise_std: Optional[float] = None  # 0-255 scale

    def __len__(self):
        return len(self.frames)


def add_volume_noise(seq: Sequence, std: float, rng: torch.Generator) -> NoisyVolume:
    """Additive Gaussian noise with std given on the 0-255 scale, clamped to [0, 1]."""
    if std < 0:
        raise ValueError(f"Noise std must be >= 0, got {std}")
    if std == 0:
        return NoisyVolume(Sequence(seq.frames.clone(), seq.frame_rate_hint), assumed_noise_std=0.0)
    noise = torch.randn(seq.frames.shape, generator=rng, dtype=seq.frames.dtype)
    noisy = (seq.frames + (std / 255.0) * noise).clamp(0.0, 1.0)
    return NoisyVolume(Sequence(noisy, seq.frame_rate_hint), assumed_noise_std=float(std))


def sampling_index(sched: NoiseSchedule, t_star: int) -> int:
    """Number of sampling steps at or below training timestep t_star (0 when t_star precedes them all)."""
    timesteps = getattr(sched, "timesteps", None)
    train_T = getattr(sched, "train_T", 0) or sched.T
    if not 1 <= t_star <= train_T:
        raise ValueError(f"t_star must lie in [1, {train_T}], got {t_star}")
    if timesteps is None:
        return t_star
    return int((timesteps <= t_star).sum())


def _denoise_sdedit(model, z: torch.Tensor, sched: NoiseSchedule, t_star: int, rng: torch.Generator) -> torch.Tensor:
    """
    Noise z to training level t_star, then run the reverse chain from the
    last sampling step at or below t_star.

    When t_star falls between sampling steps, one deterministic jump
    (predict x0 at t_star, re-noise with the same eps estimate) lands the
    state on that step's level; below the first step the jump ends at x0.
    """
    a_star = sched.train_alpha_bar_at(t_star)
    x = noise_to_level(z, a_star, torch.randn(z.shape, generator=rng, dtype=z.dtype))
    start = sampling_index(sched, t_star)
    landing = sched.model_timestep(start) if start else 0
    if landing < t_star:
        eps_pred = denoise_forward(model, x, t_star)
        x0_pred = (x - (1.0 - a_star) ** 0.5 * eps_pred) / a_star ** 0.5
        x = noise_to_level(x0_pred, sched.alpha_bar_at(start), eps_pred)
    for t in range(start, 0, -1):
        eps_pred = denoise_forward(model, x, sched.model_timestep(t))
        x = reverse_step(x, t, eps_pred, step_noise(t, z.shape, rng, z.dtype), sched)
    return x


def _denoise_literal(model, z: torch.Tensor, sched: NoiseSchedule, rng: torch.Generator) -> torch.Tensor:
    x_hat = z
    for t in range(sched.T, 0, -1):
        eps = step_noise(t, z.shape, rng, z.dtype)
        x_bar = noise_to_level(z, sched.alpha_bar_at(min(t + 1, sched.T)), eps)
        eps_pred = denoise_forward(model, x_bar, sched.model_timestep(t))
        x_hat = reverse_step(x_bar, t, eps_pred, eps, sched)
    return x_hat


def denoise_volume(stage1: DenoiserModel, stage2: Optional[DenoiserModel], vol: NoisyVolume, layout: GridLayout,
                   sched: NoiseSchedule, mode: str = "sdedit", t_star: int = 100, seed: int = 0,
                   codec: Optional[LatentCodec] = None, sr_sched: Optional[NoiseSchedule] = None,
                   sr_scale: Optional[int] = None, workers: int = 1) -> Sequence:
    """
    Denoise a volume window by window.

    Frames are resampled to the layout's element size and packed into
    K^2-frame grids (the tail window overlaps and is averaged in). Without
    a Stage-2 model the result stays at element resolution; with one, each
    frame is super-resolved by sr_scale (default: back to the input size).
    """
    if mode not in MODES:
        raise ValueError(f"Unknown denoise mode '{mode}', expected one of {MODES}")
    codec = codec or IdentityCodec()
    seq = vol.frames
    K = layout.K
    if len(seq) < K * K:
        raise ValueError(f"Volume of {len(seq)} frames is shorter than one grid (K^2={K * K})")
    if mode == "sdedit":
        sampling_index(sched, t_star)

    small = [resample_frame(f, layout.element_h, layout.element_w) for f in seq.frames]
    grids = []
    with torch.no_grad():
        for start in window_starts(len(seq), K):
            grid = pack_grid(small[start:start + K * K], layout, start_index=start)
            z = codec.encode(grid.pixels)
            rng = make_generator(derive_seed(seed, "denoise", start))
            if mode == "sdedit":
                z = _denoise_sdedit(stage1, z, sched, t_star, rng)
            else:
                z = _denoise_literal(stage1, z, sched, rng)
            grids.append(GridImage(pixels=codec.decode(z), layout=layout, start_index=start))
            logger.debug("Denoised window starting at frame %d", start)

    _, frames = assemble_grid_sequence(grids)
    frames = frames.clamp(0.0, 1.0)
    logger.info("Denoised %d frames in %d windows (%s)", len(seq), len(grids), mode)

    if stage2 is not None:
        scale = sr_scale or seq.height // layout.element_h
        frames = refine_sequence(stage2, list(frames.unbind(0)), scale, sr_sched or sched, seed,
                                 codec=codec, workers=workers).frames
    if seq.channels == 1:
        frames = frames.mean(dim=1, keepdim=True)
    return Sequence(frames, seq.frame_rate_hint)
