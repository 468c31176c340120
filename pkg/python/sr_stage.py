"""
Stage-2 refinement: degraded/clean training pairs, conditional training,
per-frame super-resolution and whole-sequence refinement.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence as Seq, Tuple, Union

import torch
from torchvision.transforms.functional import gaussian_blur

from denoiser import (
    DenoiserModel,
    IdentityCodec,
    LatentCodec,
    TrainConfig,
    TrainResult,
    denoise_forward,
    train,
)
from diffusion import DivergenceError, NoiseSchedule, derive_seed, make_generator, reverse_step, step_noise
from sampler import CoarseSequence
from seqgrid import Sequence, resample_frame

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def blur_sigma(kernel: int) -> float:
    """Gaussian sigma implied by a kernel size when none is given."""
    return 0.3 * ((kernel - 1) / 2.0 - 1.0) + 0.8


@dataclass(frozen=True)
class DegradeParams:
    scale: int = 4
    noise_std_range: Tuple[int, int] = (10, 15)
    blur_kernels: Tuple[int, ...] = (9, 11, 13, 15)
    blur_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.noise_std_range
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if lo < 0 or hi < lo:
            raise ValueError(f"noise_std_range must be a non-empty range, got {self.noise_std_range}")
        if not self.blur_kernels:
            raise ValueError("blur_kernels must not be empty")
        for k in self.blur_kernels:
            if k < 3 or k % 2 == 0:
                raise ValueError(f"Blur kernels must be odd and >= 3, got {k}")
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError(f"blur_prob must lie in [0, 1], got {self.blur_prob}")


@dataclass(frozen=True)
class DegradeDraw:
    scale: int
    noise_std: int
    blur_kernel: Optional[int] = None
    blur_sigma: Optional[float] = None

    def to_dict(self):
        return asdict(self)


@dataclass
class SRPair:
    lr_cond: torch.Tensor
    hr: torch.Tensor
    params_used: DegradeDraw


def apply_degradation(hr: torch.Tensor, draw: DegradeDraw, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Deterministic part of degrade: resize chain, noise on the 0-255 scale, optional blur."""
    _, h, w = hr.shape
    if h % draw.scale or w % draw.scale:
        raise ValueError(f"Frame size {h}x{w} is not divisible by scale {draw.scale}")
    out = resample_frame(resample_frame(hr, h // draw.scale, w // draw.scale), h, w)
    if draw.noise_std > 0:
        if noise is None:
            raise ValueError("A noise field is required when noise_std > 0")
        out = (out * 255.0 + draw.noise_std * noise).clamp(0.0, 255.0) / 255.0
    if draw.blur_kernel is not None:
        k = draw.blur_kernel
        out = gaussian_blur(out, kernel_size=[k, k], sigma=[draw.blur_sigma, draw.blur_sigma])
    return out


def degrade(hr: torch.Tensor, p: DegradeParams, rng: torch.Generator) -> SRPair:
    """Draw one degradation and apply it; the draw record is kept on the pair."""
    _, h, w = hr.shape
    if h % p.scale or w % p.scale:
        raise ValueError(f"Frame size {h}x{w} is not divisible by scale {p.scale}")
    lo, hi = p.noise_std_range
    std = int(torch.randint(lo, hi + 1, (1,), generator=rng))
    noise = torch.randn(hr.shape, generator=rng, dtype=hr.dtype) if std > 0 else None
    kernel = sigma = None
    if float(torch.rand(1, generator=rng)) < p.blur_prob:
        kernel = int(p.blur_kernels[int(torch.randint(0, len(p.blur_kernels), (1,), generator=rng))])
        sigma = blur_sigma(kernel)
    draw = DegradeDraw(scale=p.scale, noise_std=std, blur_kernel=kernel, blur_sigma=sigma)
    return SRPair(lr_cond=apply_degradation(hr, draw, noise), hr=hr, params_used=draw)


def make_pairs(hr_frames: torch.Tensor, p: DegradeParams, seed: int) -> List[SRPair]:
    return [
        degrade(frame, p, make_generator(derive_seed(seed, "pair", i)))
        for i, frame in enumerate(hr_frames)
    ]


def _check_sr_model(model: DenoiserModel, frame_shape, codec: LatentCodec):
    cfg = model.config
    if not cfg.conditional:
        raise ValueError("Stage-2 needs a conditional model")
    c, h, w = frame_shape
    expected = (codec.latent_channels(c), h // codec.scale_factor, w // codec.scale_factor)
    if (cfg.input_channels, cfg.input_size, cfg.input_size) != expected:
        raise ValueError(
            f"Model expects [{cfg.input_channels}, {cfg.input_size}, {cfg.input_size}] "
            f"but frames encode to {list(expected)}"
        )


def train_sr(model: DenoiserModel, hr_frames: torch.Tensor, p: DegradeParams, cfg: TrainConfig,
             sched: NoiseSchedule, seed: int, codec: Optional[LatentCodec] = None,
             fresh_pairs: bool = True, on_divergence=None) -> TrainResult:
    """
    Train the conditional model to restore hr from its degraded copy.

    With fresh_pairs every batch draws new degradations; otherwise one
    pair per frame is made up front and reused.
    """
    codec = codec or IdentityCodec()
    if hr_frames.dim() != 4 or hr_frames.shape[0] == 0:
        raise ValueError("train_sr needs a non-empty [M, C, H, W] frame stack")
    _check_sr_model(model, tuple(hr_frames.shape[1:]), codec)

    if not fresh_pairs:
        pairs = make_pairs(hr_frames, p, seed)
        x0 = codec.encode(torch.stack([pair.hr for pair in pairs]))
        cond = codec.encode(torch.stack([pair.lr_cond for pair in pairs]))
        return train(model, (x0, cond), cfg, sched, seed, on_divergence=on_divergence)

    def batch_fn(step: int, generator: torch.Generator):
        idx = torch.randint(0, hr_frames.shape[0], (cfg.batch_size,), generator=generator)
        hr, lr = [], []
        for b, i in enumerate(idx.tolist()):
            pair = degrade(hr_frames[i], p, make_generator(derive_seed(seed, "degrade", step, b)))
            hr.append(pair.hr)
            lr.append(pair.lr_cond)
        return codec.encode(torch.stack(hr)), codec.encode(torch.stack(lr))

    return train(model, None, cfg, sched, seed, batch_fn=batch_fn, on_divergence=on_divergence)


def bicubic_baseline(frame: torch.Tensor, scale: int) -> torch.Tensor:
    _, h, w = frame.shape
    return resample_frame(frame, h * scale, w * scale)


def super_resolve(model: DenoiserModel, coarse_frame: torch.Tensor, scale: int, sched: NoiseSchedule,
                  rng: torch.Generator, codec: Optional[LatentCodec] = None) -> torch.Tensor:
    """Conditional DDPM sampling guided by the bicubic upsample of coarse_frame."""
    codec = codec or IdentityCodec()
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    cond_pixels = bicubic_baseline(coarse_frame.clamp(0.0, 1.0), scale)
    _check_sr_model(model, tuple(cond_pixels.shape), codec)
    cond = codec.encode(cond_pixels)
    x = torch.randn(cond.shape, generator=rng)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            eps_pred = denoise_forward(model, x, sched.model_timestep(t), cond)
            x = reverse_step(x, t, eps_pred, step_noise(t, x.shape, rng), sched)
            if not torch.isfinite(x).all():
                raise DivergenceError(f"Super-resolution sample became non-finite at step {t}")
    return codec.decode(x).clamp(0.0, 1.0)


def refine_sequence(model: DenoiserModel, coarse: Union[CoarseSequence, Sequence, Seq[torch.Tensor]],
                    scale: int, sched: NoiseSchedule, seed: int, codec: Optional[LatentCodec] = None,
                    workers: int = 1) -> Sequence:
    """Super-resolve every frame independently; frame j always uses the seed stream ("sr", j)."""
    if isinstance(coarse, CoarseSequence):
        frames = list(coarse.frames)
    elif isinstance(coarse, Sequence):
        frames = list(coarse.frames.unbind(0))
    else:
        frames = list(coarse)
    if not frames:
        raise ValueError("Nothing to refine")

    def refine(index: int) -> torch.Tensor:
        rng = make_generator(derive_seed(seed, "sr", index))
        return super_resolve(model, frames[index], scale, sched, rng, codec)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            refined = list(pool.map(refine, range(len(frames))))
    else:
        refined = [refine(i) for i in range(len(frames))]
    logger.info("Refined %d frames at x%d", len(refined), scale)
    return Sequence.from_frames(refined)
