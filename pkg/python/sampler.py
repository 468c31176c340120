"""
Grid sampling: plain DDPM sampling of a first grid, autoregressive coarse
generation by masked inpainting of row-shifted control rows, temporal
interpolation between consecutive grids, and frame assembly.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from denoiser import DenoiserModel, IdentityCodec, LatentCodec, denoise_forward
from diffusion import (
    CONTROL_ALPHA_CHOICES,
    DivergenceError,
    NoiseSchedule,
    control_alpha_bar,
    derive_seed,
    make_generator,
    noise_to_level,
    reverse_step,
    step_noise,
)
from seqgrid import GridLayout, Sequence, make_masks, row_shift, unpack_grid

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass
class SamplerPlan:
    """
    Everything one generation run needs.

    `layout` is given in pixel space; masks and row shifts act on
    `latent_layout`, the same grid at the codec's spatial scale.
    """

    layout: GridLayout
    N: int
    sched: NoiseSchedule
    seed: int = 0
    interpolate: bool = True
    control_alpha: str = "literal"
    codec: LatentCodec = field(default_factory=IdentityCodec)
    log_every: int = 0

    def __post_init__(self):
        K, r = self.layout.K, self.layout.r
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.N > 1 and not 0 < r < K:
            raise ValueError(f"Autoregressive steps need 0 < r < K, got r={r}, K={K}")
        if self.interpolate and self.N >= 2 and K < 3:
            raise ValueError(f"Interpolation needs K >= 3, got K={K}")
        if self.control_alpha not in CONTROL_ALPHA_CHOICES:
            raise ValueError(f"Unknown control_alpha '{self.control_alpha}'")

    @property
    def latent_layout(self) -> GridLayout:
        return self.layout.scaled(self.codec.scale_factor)

    @property
    def interpolating(self) -> bool:
        return self.interpolate and self.N >= 2

    def expected_length(self) -> int:
        K, r = self.layout.K, self.layout.r
        per_step = (K - r) * K
        if self.interpolating:
            per_step += (K - 2) * K
        return K * K + (self.N - 1) * per_step

    def nominal_length(self) -> Optional[int]:
        """Commonly quoted length 12N - 4 for K=4, r=3 with interpolation; None otherwise."""
        if (self.layout.K, self.layout.r) == (4, 3) and self.interpolate:
            return 12 * self.N - 4
        return None


@dataclass
class CoarseSequence:
    frames: List[torch.Tensor]
    provenance: List[str]
    nominal_length: Optional[int] = None

    def __post_init__(self):
        if len(self.frames) != len(self.provenance):
            raise ValueError("Every coarse frame needs exactly one provenance tag")

    def __len__(self):
        return len(self.frames)

    def to_sequence(self) -> Sequence:
        return Sequence(torch.stack(self.frames, dim=0).clamp(0.0, 1.0))


def _grid_shape(model: DenoiserModel):
    cfg = model.config
    return (cfg.input_channels, cfg.input_size, cfg.input_size)


def _check_layout(model: DenoiserModel, layout: GridLayout):
    cfg = model.config
    if (layout.grid_h, layout.grid_w) != (cfg.input_size, cfg.input_size):
        raise ValueError(
            f"Grid {layout.grid_h}x{layout.grid_w} does not match model input size {cfg.input_size}"
        )
    if layout.K != cfg.grid_K:
        raise ValueError(f"Layout K={layout.K} does not match model grid_K={cfg.grid_K}")


def _check_finite(x: torch.Tensor, t: int, what: str):
    if not torch.isfinite(x).all():
        raise DivergenceError(f"{what} became non-finite at reverse step {t}")


def sample_grid(model: DenoiserModel, sched: NoiseSchedule, rng: torch.Generator, log_every: int = 0) -> torch.Tensor:
    """Standard ancestral sampling of one grid from unit Gaussian noise."""
    if model.conditional:
        raise ValueError("sample_grid needs an unconditional model")
    shape = _grid_shape(model)
    x = torch.randn(shape, generator=rng)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            eps_pred = denoise_forward(model, x, sched.model_timestep(t))
            x = reverse_step(x, t, eps_pred, step_noise(t, shape, rng), sched)
            _check_finite(x, t, "grid sample")
            if log_every and t % log_every == 0:
                logger.debug("sample_grid t=%d std=%.4f", t, float(x.std()))
    return x


def ar_step1(model: DenoiserModel, plan: SamplerPlan, x_first: Optional[torch.Tensor] = None) -> List[torch.Tensor]:
    """
    Coarse autoregressive generation: N grids, each new grid inpainted
    under the row-shifted last r rows of its predecessor.
    """
    layout = plan.latent_layout
    _check_layout(model, layout)
    if x_first is None:
        x_first = sample_grid(model, plan.sched, make_generator(derive_seed(plan.seed, "sample_grid")), plan.log_every)
    grids = [x_first]
    if plan.N == 1:
        return grids

    mask = make_masks(layout, "step1").expand(layout).bool()
    shape = _grid_shape(model)
    sched = plan.sched
    with torch.no_grad():
        for it in range(1, plan.N):
            rng = make_generator(derive_seed(plan.seed, "step1", it))
            prev = grids[-1]
            x = torch.randn(shape, generator=rng)
            for t in range(sched.T, 0, -1):
                eps = step_noise(t, shape, rng)
                a = control_alpha_bar(sched, t, plan.control_alpha)
                control = row_shift(noise_to_level(prev, a, eps), layout)
                eps_pred = denoise_forward(model, x, sched.model_timestep(t))
                x = reverse_step(x, t, eps_pred, eps, sched)
                x = torch.where(mask, control, x)
                _check_finite(x, t, f"step-1 grid {it}")
            grids.append(x)
            logger.info("Generated coarse grid %d/%d", it + 1, plan.N)
    return grids


def interp_step2(model: DenoiserModel, plan: SamplerPlan, grids: List[torch.Tensor]) -> List[torch.Tensor]:
    """One interpolation grid per adjacent pair: first row from grid i, last row from grid i+1."""
    layout = plan.latent_layout
    _check_layout(model, layout)
    if len(grids) < 2:
        raise ValueError(f"Interpolation needs at least two grids, got {len(grids)}")
    if layout.K < 3:
        raise ValueError(f"Interpolation needs K >= 3, got K={layout.K}")

    m_prev, _, m_next = (m.expand(layout).bool() for m in make_masks(layout, "step2"))
    last_row = layout.with_rows(1)
    shape = _grid_shape(model)
    sched = plan.sched
    out = []
    with torch.no_grad():
        for i in range(len(grids) - 1):
            rng = make_generator(derive_seed(plan.seed, "step2", i + 1))
            x = torch.randn(shape, generator=rng)
            for t in range(sched.T, 0, -1):
                eps = step_noise(t, shape, rng)
                a = control_alpha_bar(sched, t, plan.control_alpha)
                ctrl_prev = row_shift(noise_to_level(grids[i], a, eps), last_row)
                ctrl_next = noise_to_level(grids[i + 1], a, eps)
                eps_pred = denoise_forward(model, x, sched.model_timestep(t))
                x = reverse_step(x, t, eps_pred, eps, sched)
                x = torch.where(m_prev, ctrl_prev, torch.where(m_next, ctrl_next, x))
                _check_finite(x, t, f"step-2 grid {i + 1}")
            out.append(x)
            logger.info("Interpolated grid %d/%d", i + 1, len(grids) - 1)
    return out


def assemble_sequence(step1_grids: List[torch.Tensor], step2_grids: Optional[List[torch.Tensor]],
                      plan: SamplerPlan) -> CoarseSequence:
    """
    Unroll grids into temporal order without duplicating control copies:
    grid 0 whole, then per iteration the interpolated middle rows followed
    by the newly generated rows.
    """
    K, r = plan.layout.K, plan.layout.r
    if len(step1_grids) != plan.N:
        raise ValueError(f"Expected {plan.N} step-1 grids, got {len(step1_grids)}")
    step2_grids = step2_grids or []
    expected_interp = plan.N - 1 if plan.interpolating else 0
    if len(step2_grids) != expected_interp:
        raise ValueError(f"Expected {expected_interp} interpolation grids, got {len(step2_grids)}")

    def frames_of(grid):
        return unpack_grid(plan.codec.decode(grid), K)

    frames, provenance = [], []
    first = frames_of(step1_grids[0])
    frames.extend(first)
    provenance.extend(["initial"] * len(first))
    for i in range(1, plan.N):
        if step2_grids:
            middle = frames_of(step2_grids[i - 1])[K:(K - 1) * K]
            frames.extend(middle)
            provenance.extend([f"interp@{i}"] * len(middle))
        new = frames_of(step1_grids[i])[r * K:]
        frames.extend(new)
        provenance.extend([f"new@{i}"] * len(new))

    if len(frames) != plan.expected_length():
        raise ValueError(f"Assembled {len(frames)} frames, expected {plan.expected_length()}")
    return CoarseSequence(frames=frames, provenance=provenance, nominal_length=plan.nominal_length())


def generate_sequence(stage1_model: DenoiserModel, plan: SamplerPlan) -> CoarseSequence:
    grids = ar_step1(stage1_model, plan)
    interp = interp_step2(stage1_model, plan, grids) if plan.interpolating else None
    coarse = assemble_sequence(grids, interp, plan)
    nominal = plan.nominal_length()
    if nominal is not None and nominal != len(coarse):
        logger.warning(
            "Generated %d frames; the nominal 12N-4 formula gives %d for N=%d", len(coarse), nominal, plan.N
        )
    return coarse
