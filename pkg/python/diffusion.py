"""
DDPM noise schedules, forward corruption, ancestral reverse steps,
respacing and the epsilon-prediction training loss.

Timesteps are 1-based: t = 1..T, with alpha_bar at t = 0 defined as 1.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

SIGMA_CHOICES = ("posterior", "beta")


class DivergenceError(RuntimeError):
    """Raised when a loss or a sampling state stops being finite."""


def derive_seed(root_seed: int, *keys) -> int:
    """Deterministic 63-bit child seed of root_seed for the given keys."""
    text = ":".join([str(int(root_seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


@dataclass(eq=False)
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_choice: str = "posterior"

    def alpha_bar_at(self, t: int) -> float:
        if t < 0 or t > self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def alpha_bar_tensor(self, t: int) -> torch.Tensor:
        if t == 0:
            return torch.ones((), dtype=torch.float64)
        return self.alpha_bar[t - 1]

    def model_timestep(self, t: int) -> int:
        """Training-time timestep the denoiser sees at step t of this schedule."""
        return t

    def train_alpha_bar_at(self, t: int) -> float:
        """alpha_bar of the training schedule at training timestep t."""
        return self.alpha_bar_at(t)

    def to_dict(self) -> Dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "sigma_choice": self.sigma_choice,
        }


@dataclass(eq=False)
class SamplingSchedule(NoiseSchedule):
    timesteps: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    train_T: int = 0
    train_alpha_bar: Optional[torch.Tensor] = None

    @property
    def T_s(self) -> int:
        return self.T

    def model_timestep(self, t: int) -> int:
        return int(self.timesteps[t - 1])

    def train_alpha_bar_at(self, t: int) -> float:
        if t < 0 or t > self.train_T:
            raise ValueError(f"training timestep {t} outside [0, {self.train_T}]")
        return 1.0 if t == 0 else float(self.train_alpha_bar[t - 1])

    def to_dict(self) -> Dict:
        info = super().to_dict()
        info.update({"T": self.train_T, "T_s": self.T})
        return info


def _sigma(beta: torch.Tensor, alpha_bar: torch.Tensor, alpha_bar_prev: torch.Tensor, choice: str) -> torch.Tensor:
    if choice == "beta":
        return torch.sqrt(beta)
    if choice == "posterior":
        return torch.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
    raise ValueError(f"Unknown sigma choice '{choice}', expected one of {SIGMA_CHOICES}")


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                   sigma_choice: str = "posterior") -> NoiseSchedule:
    """Linear beta schedule over T steps (float64 tables)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    sigma = _sigma(beta, alpha_bar, alpha_bar_prev, sigma_choice)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma,
                         beta_start=beta_start, beta_end=beta_end, sigma_choice=sigma_choice)


def respace(sched: NoiseSchedule, T_s: int) -> SamplingSchedule:
    """Keep T_s evenly strided timesteps ending at T and recompute the step tables."""
    T = sched.T
    if not 1 <= T_s <= T:
        raise ValueError(f"T_s must lie in [1, {T}], got {T_s}")
    timesteps = torch.tensor([(i * T) // T_s for i in range(1, T_s + 1)], dtype=torch.long)

    betas = []
    prev = 0
    for tau in timesteps.tolist():
        if tau - prev == 1:
            betas.append(sched.beta[tau - 1])
        else:
            betas.append(1.0 - sched.alpha_bar[tau - 1] / sched.alpha_bar_tensor(prev))
        prev = tau
    beta = torch.stack(betas).to(torch.float64)
    alpha = 1.0 - beta
    alpha_bar = sched.alpha_bar[timesteps - 1].clone()
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    sigma = _sigma(beta, alpha_bar, alpha_bar_prev, sched.sigma_choice)
    return SamplingSchedule(T=T_s, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma,
                            beta_start=sched.beta_start, beta_end=sched.beta_end,
                            sigma_choice=sched.sigma_choice, timesteps=timesteps, train_T=T,
                            train_alpha_bar=sched.alpha_bar.clone())


def noise_to_level(x0: torch.Tensor, alpha_bar: float, eps: torch.Tensor) -> torch.Tensor:
    """sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match x0 shape {tuple(x0.shape)}")
    a = float(alpha_bar)
    return (a ** 0.5) * x0 + ((1.0 - a) ** 0.5) * eps


def forward_noise(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    return noise_to_level(x0, sched.alpha_bar_at(t), eps)


CONTROL_ALPHA_CHOICES = ("literal", "shifted")


def control_alpha_bar(sched: NoiseSchedule, t: int, choice: str = "literal") -> float:
    """
    Noise level used for the control grid at reverse step t.

    literal: alpha_bar_t, except at t = 1 where alpha_bar_0 = 1 so the
    final recombination copies the control rows exactly.
    shifted: alpha_bar_{t-1}, the level of the sample after the step.
    """
    if choice == "literal":
        return 1.0 if t == 1 else sched.alpha_bar_at(t)
    if choice == "shifted":
        return sched.alpha_bar_at(t - 1)
    raise ValueError(f"Unknown control_alpha '{choice}', expected one of {CONTROL_ALPHA_CHOICES}")


def reverse_step(x_t: torch.Tensor, t: int, eps_pred: torch.Tensor, eps: Optional[torch.Tensor],
                 sched: NoiseSchedule) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1}; the fresh noise is dropped at t = 1."""
    if t < 1 or t > sched.T:
        raise ValueError(f"reverse_step needs 1 <= t <= {sched.T}, got {t}")
    if eps_pred.shape != x_t.shape:
        raise ValueError(f"eps_pred shape {tuple(eps_pred.shape)} does not match x_t {tuple(x_t.shape)}")
    alpha = float(sched.alpha[t - 1])
    beta = float(sched.beta[t - 1])
    alpha_bar = float(sched.alpha_bar[t - 1])
    mean = (x_t - (beta / (1.0 - alpha_bar) ** 0.5) * eps_pred) / alpha ** 0.5
    if t == 1 or eps is None:
        return mean
    return mean + float(sched.sigma[t - 1]) * eps


def step_noise(t: int, shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Fresh unit Gaussian for t > 1, zeros at the final step."""
    if t > 1:
        return torch.randn(shape, generator=generator, dtype=dtype)
    return torch.zeros(shape, dtype=dtype)


def lr_at_step(step: int, lr_min: float, lr_max: float, warmup_steps: int) -> float:
    """Linear warmup from lr_min to lr_max over warmup_steps, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return lr_max
    return lr_min + (lr_max - lr_min) * step / warmup_steps


def training_loss(model, x0_batch: torch.Tensor, rng: torch.Generator, sched: NoiseSchedule,
                  cond: Optional[torch.Tensor] = None, backward: bool = True) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Epsilon-MSE at uniformly drawn timesteps.

    Returns the scalar loss and, when backward is set, the parameter
    gradients keyed by parameter name.
    """
    if x0_batch.shape[0] == 0:
        raise ValueError("training_loss needs a non-empty batch")
    batch = x0_batch.shape[0]
    t = torch.randint(1, sched.T + 1, (batch,), generator=rng)
    eps = torch.randn(x0_batch.shape, generator=rng, dtype=x0_batch.dtype)
    alpha_bar = sched.alpha_bar[t - 1].to(x0_batch.dtype).view(batch, *([1] * (x0_batch.dim() - 1)))
    x_t = alpha_bar.sqrt() * x0_batch + (1.0 - alpha_bar).sqrt() * eps

    timesteps = torch.tensor([sched.model_timestep(int(s)) for s in t], dtype=torch.long)
    pred = model(x_t, timesteps, cond) if cond is not None else model(x_t, timesteps)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise DivergenceError(f"Training loss became non-finite ({loss.item()})")

    grads: Dict[str, torch.Tensor] = {}
    if backward:
        loss.backward()
        for name, param in model.named_parameters():
            if param.grad is not None:
                grads[name] = param.grad
    return loss, grads
