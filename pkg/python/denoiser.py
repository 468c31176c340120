"""
Small diffusion transformer used by both stages.

Stage 1 is unconditional over grid images. Stage 2 concatenates a degraded
frame with the noisy input along channels before the patch projection, and
can optionally add a pooled condition vector to the adaLN input.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from timm.models.vision_transformer import Attention, Mlp

from diffusion import DivergenceError, NoiseSchedule, lr_at_step, make_generator, training_loss
from posembed import SCHEMES, build_pos_embed
from seqgrid import GridLayout

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

TIMESTEP_FREQ_DIM = 256


@dataclass
class DenoiserConfig:
    input_channels: int = 3
    input_size: int = 64
    patch: int = 2
    depth: int = 4
    width: int = 128
    heads: int = 4
    conditional: bool = False
    pos_scheme: str = "combined"
    grid_K: int = 4
    adaln_cond: bool = False
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.input_size % self.patch:
            raise ValueError(f"input_size {self.input_size} is not divisible by patch {self.patch}")
        if self.input_size % self.grid_K or (self.input_size // self.grid_K) % self.patch:
            raise ValueError(
                f"input_size {self.input_size} must split into {self.grid_K}x{self.grid_K} elements "
                f"whose size is divisible by patch {self.patch}"
            )
        if self.pos_scheme not in SCHEMES:
            raise ValueError(f"Unknown pos_scheme '{self.pos_scheme}'")
        if self.adaln_cond and not self.conditional:
            raise ValueError("adaln_cond requires a conditional model")
        if self.depth < 1 or self.input_channels < 1:
            raise ValueError("depth and input_channels must be positive")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "DenoiserConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------------------
# Latent codecs
# ---------------------------------------------------------------------------

class LatentCodec:
    """encode/decode pair between pixel space and the space the denoiser sees."""

    name = "base"
    scale_factor = 1

    def latent_channels(self, channels: int) -> int:
        return channels

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class IdentityCodec(LatentCodec):
    name = "identity"

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


class SpaceToDepthCodec(LatentCodec):
    """Invertible pixel-unshuffle: halves spatial size, quadruples channels."""

    name = "space_to_depth"
    scale_factor = 2

    def latent_channels(self, channels: int) -> int:
        return channels * self.scale_factor ** 2

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 3
        z = F.pixel_unshuffle(x.unsqueeze(0) if single else x, self.scale_factor)
        return z[0] if single else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        single = z.dim() == 3
        x = F.pixel_shuffle(z.unsqueeze(0) if single else z, self.scale_factor)
        return x[0] if single else x


CODECS = {"identity": IdentityCodec, "space_to_depth": SpaceToDepthCodec}


def make_codec(name: str = "identity") -> LatentCodec:
    if name not in CODECS:
        raise ValueError(f"Unknown latent codec '{name}', expected one of {sorted(CODECS)}")
    return CODECS[name]()


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """[.., C, S, S] -> [.., (S/p)^2, C*p*p], patches row-major, channel-major inside."""
    h, w = x.shape[-2:]
    if h % patch or w % patch:
        raise ValueError(f"Image size {h}x{w} is not divisible by patch {patch}")
    return rearrange(x, "... c (h p) (w q) -> ... (h w) (c p q)", p=patch, q=patch)


def unpatchify(tokens: torch.Tensor, patch: int, C: int, S: int) -> torch.Tensor:
    if S % patch:
        raise ValueError(f"Size {S} is not divisible by patch {patch}")
    n = S // patch
    if tokens.shape[-2] != n * n or tokens.shape[-1] != C * patch * patch:
        raise ValueError(
            f"Tokens {tuple(tokens.shape)} inconsistent with patch={patch}, C={C}, S={S}"
        )
    return rearrange(tokens, "... (h w) (c p q) -> ... c (h p) (w q)", h=n, w=n, p=patch, q=patch)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sine block then cosine block, as sincos_1d does for positions."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden_size: int, frequency_embedding_size: int = TIMESTEP_FREQ_DIM):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(frequency_embedding_size, hidden_size, bias=True),
            nn.SiLU(),
            nn.Linear(hidden_size, hidden_size, bias=True),
        )
        self.frequency_embedding_size = frequency_embedding_size

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_embedding(t, self.frequency_embedding_size).to(dtype))


class DenoiserBlock(nn.Module):
    """Self-attention + MLP block with adaLN-zero modulation."""

    def __init__(self, hidden_size: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden_size, num_heads=num_heads, qkv_bias=True)
        self.norm2 = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        approx_gelu = lambda: nn.GELU(approximate="tanh")  # noqa: E731
        self.mlp = Mlp(in_features=hidden_size, hidden_features=int(hidden_size * mlp_ratio),
                       act_layer=approx_gelu, drop=0)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden_size, 6 * hidden_size, bias=True))

    def forward(self, x, c):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class FinalLayer(nn.Module):
    def __init__(self, hidden_size: int, patch: int, out_channels: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden_size, patch * patch * out_channels, bias=True)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden_size, 2 * hidden_size, bias=True))

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


class DenoiserModel(nn.Module):
    """Epsilon predictor over [B, C, S, S] inputs."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        C, p, D = config.input_channels, config.patch, config.width
        in_channels = 2 * C if config.conditional else C

        self.x_embedder = nn.Linear(in_channels * p * p, D, bias=True)
        self.t_embedder = TimestepEmbedder(D)
        self.cond_embedder = nn.Linear(C, D, bias=True) if config.adaln_cond else None
        self.blocks = nn.ModuleList(
            [DenoiserBlock(D, config.heads, mlp_ratio=config.mlp_ratio) for _ in range(config.depth)]
        )
        self.final_layer = FinalLayer(D, p, C)

        element = config.input_size // config.grid_K
        layout = GridLayout(K=config.grid_K, r=0, element_h=element, element_w=element)
        table = build_pos_embed(layout, p, D, scheme=config.pos_scheme)
        # fixed table, rebuilt from config rather than stored in checkpoints
        self.register_buffer(
            "pos_embed", torch.from_numpy(table.values).float().unsqueeze(0), persistent=False
        )
        self.initialize_weights()

    @property
    def conditional(self) -> bool:
        return self.config.conditional

    def initialize_weights(self):
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                torch.nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.constant_(module.bias, 0)

        self.apply(_basic_init)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)

        # adaLN-zero: every block starts as the identity and the head outputs zeros
        for block in self.blocks:
            nn.init.constant_(block.adaLN_modulation[-1].weight, 0)
            nn.init.constant_(block.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].weight, 0)
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.final_layer.linear.weight, 0)
        nn.init.constant_(self.final_layer.linear.bias, 0)
        if self.cond_embedder is not None:
            nn.init.constant_(self.cond_embedder.weight, 0)
            nn.init.constant_(self.cond_embedder.bias, 0)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        cfg = self.config
        if x.dim() != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
            raise ValueError(
                f"Expected input [B, {cfg.input_channels}, {cfg.input_size}, {cfg.input_size}], "
                f"got {tuple(x.shape)}"
            )
        if cfg.conditional and cond is None:
            raise ValueError("Conditional model called without a condition")
        if not cfg.conditional and cond is not None:
            raise ValueError("Unconditional model called with a condition")
        if cond is not None and cond.shape != x.shape:
            raise ValueError(f"Condition shape {tuple(cond.shape)} does not match input {tuple(x.shape)}")

        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])

        inp = torch.cat([x, cond], dim=1) if cond is not None else x
        tokens = self.x_embedder(patchify(inp, cfg.patch)) + self.pos_embed.to(x.dtype)
        c = self.t_embedder(t)
        if self.cond_embedder is not None:
            c = c + self.cond_embedder(cond.mean(dim=(2, 3)))
        for block in self.blocks:
            tokens = block(tokens, c)
        tokens = self.final_layer(tokens, c)
        return unpatchify(tokens, cfg.patch, cfg.input_channels, cfg.input_size)


def denoise_forward(model: DenoiserModel, x_t: torch.Tensor, t: Union[int, torch.Tensor],
                    cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """eps prediction for one [C, S, S] image or a [B, C, S, S] batch."""
    single = x_t.dim() == 3
    x = x_t.unsqueeze(0) if single else x_t
    c = None
    if cond is not None:
        if cond.shape != x_t.shape:
            raise ValueError(f"Condition shape {tuple(cond.shape)} does not match x_t {tuple(x_t.shape)}")
        c = cond.unsqueeze(0) if single else cond
    timesteps = torch.full((x.shape[0],), int(t), dtype=torch.long) if isinstance(t, int) else t
    out = model(x, timesteps, c)
    return out[0] if single else out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr_min: float = 1e-5
    lr_max: float = 1e-4
    warmup_steps: int = 500
    weight_decay: float = 0.0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("steps must be >= 0, batch_size and log_every >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError(f"Need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)
    curve: Optional[pd.DataFrame] = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


BatchFn = Callable[[int, torch.Generator], Tuple[torch.Tensor, Optional[torch.Tensor]]]


def _dataset_batch_fn(data, batch_size: int) -> BatchFn:
    if isinstance(data, (tuple, list)):
        x0_all, cond_all = data
        if x0_all.shape != cond_all.shape:
            raise ValueError("Conditional training pairs must have equal shapes")
    else:
        x0_all, cond_all = data, None
    if x0_all.shape[0] == 0:
        raise ValueError("Training dataset is empty")

    def batch(step: int, generator: torch.Generator):
        idx = torch.randint(0, x0_all.shape[0], (batch_size,), generator=generator)
        return x0_all[idx], (cond_all[idx] if cond_all is not None else None)

    return batch


def _snapshot(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _all_finite(model: nn.Module) -> bool:
    return all(torch.isfinite(p).all() for p in model.parameters())


def train(model: DenoiserModel, data, cfg: TrainConfig, sched: NoiseSchedule, seed: int,
          batch_fn: Optional[BatchFn] = None,
          on_divergence: Optional[Callable[[DenoiserModel], None]] = None) -> TrainResult:
    """
    Mini-batch AdamW on the epsilon-MSE with linear lr warmup.

    `data` is a tensor of clean inputs, or an (x0, cond) pair of tensors for
    a conditional model; `batch_fn(step, generator)` replaces it when
    batches are manufactured on the fly. On a non-finite loss the last
    finite parameters are restored, handed to `on_divergence` and the
    DivergenceError is re-raised.
    """
    if batch_fn is None:
        batch_fn = _dataset_batch_fn(data, cfg.batch_size)
    generator = make_generator(seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_min, weight_decay=cfg.weight_decay)
    model.train()

    records = []
    last_finite = _snapshot(model)
    for step in range(cfg.steps):
        lr = lr_at_step(step, cfg.lr_min, cfg.lr_max, cfg.warmup_steps)
        for group in optimizer.param_groups:
            group["lr"] = lr
        x0, cond = batch_fn(step, generator)
        optimizer.zero_grad(set_to_none=True)
        try:
            loss, _ = training_loss(model, x0, generator, sched, cond=cond)
        except DivergenceError:
            if not _all_finite(model):
                model.load_state_dict(last_finite)
            logger.error("Training diverged at step %d", step)
            if on_divergence is not None:
                on_divergence(model)
            raise
        last_finite = _snapshot(model)
        optimizer.step()

        value = float(loss.detach())
        records.append({"step": step, "loss": value, "lr": lr})
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info("step %d/%d loss %.6f lr %.2e", step + 1, cfg.steps, value, lr)

    model.eval()
    curve = pd.DataFrame.from_records(records, columns=["step", "loss", "lr"])
    return TrainResult(losses=[r["loss"] for r in records], curve=curve)


def plot_loss_curve(curve: pd.DataFrame, output_path: str, title: str = "Training loss") -> str:
    """Save the loss curve as a PNG next to a training run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(curve["step"], curve["loss"], linewidth=1.0)
    if len(curve) > 20:
        ax.plot(curve["step"], curve["loss"].rolling(20, min_periods=1).mean(), linewidth=2.0)
    ax.set_xlabel("step")
    ax.set_ylabel("eps MSE")
    ax.set_yscale("log")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(output_path, dpi=100)
    plt.close(fig)
    logger.info("Loss curve saved to %s", output_path)
    return output_path
