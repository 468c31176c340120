"""
Configuration loader and run-configuration validation
"""
import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import yaml

from denoiser import DenoiserConfig, TrainConfig, make_codec
from diffusion import CONTROL_ALPHA_CHOICES, SIGMA_CHOICES, NoiseSchedule, SamplingSchedule, build_schedule, respace
from seqgrid import GridLayout
from sr_stage import DegradeParams
from synth_data import SynthSpec

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def load_config(config_path=None):
    """
    Load configuration from YAML file

    Args:
        config_path (str): Path to config.yaml file. If None, searches in parent directory.

    Returns:
        dict: Configuration dictionary

    A missing file, or a broken default file, falls back to the defaults.
    An explicitly given file that does not parse to a mapping raises
    ConfigError.
    """
    explicit = config_path is not None
    if config_path is None:
        script_dir = os.path.dirname(os.path.abspath(__file__))
        config_path = os.path.join(script_dir, "..", "config.yaml")

    if not os.path.exists(config_path):
        logger.warning(f"Config file not found at {config_path}, using defaults")
        return get_default_config()

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f)
        if not isinstance(config, dict):
            raise ValueError("top level of the config file must be a mapping")
        logger.info(f"Loaded configuration from {config_path}")
        return merge_defaults(config)
    except (yaml.YAMLError, ValueError, OSError) as e:
        if explicit:
            raise ConfigError(f"config: cannot use {config_path}: {e}") from e
        logger.error(f"Error loading config file: {str(e)}")
        logger.info("Using default configuration")
        return get_default_config()


def get_default_config():
    """Return default configuration if config file is not found"""
    return {
        'paths': {
            'output_dir': '../output',
            'stage1_checkpoint': 'stage1.grdt',
            'stage2_checkpoint': 'stage2.grdt',
        },
        'data': {
            'kind': 'bouncing_shapes',
            'n_sequences': 16,
            'n_frames': 32,
            'height': 64,
            'width': 64,
            'n_shapes': 2,
            'speed_min': 1.0,
            'speed_max': 3.0,
            'radius_min': 4.0,
            'radius_max': 8.0,
            'stride': 1,
        },
        'grid': {'K': 4, 'r': 3},
        'diffusion': {
            'T': 1000,
            'beta_start': 1e-4,
            'beta_end': 0.02,
            'sigma_choice': 'posterior',
            'sampling_steps': 250,
            'codec': 'identity',
        },
        'stage1': {'depth': 4, 'width': 128, 'heads': 4, 'patch': 2, 'pos_scheme': 'combined'},
        'stage2': {'depth': 4, 'width': 128, 'heads': 4, 'patch': 2, 'pos_scheme': '2d', 'adaln_cond': False},
        'training': {
            'steps': 500,
            'batch_size': 8,
            'lr_min': 1e-5,
            'lr_max': 1e-4,
            'warmup_steps': 500,
            'weight_decay': 0.0,
            'log_every': 50,
        },
        'sampler': {'iterations': 2, 'interpolate': True, 'control_alpha': 'literal', 'log_every': 0},
        'sr': {'scale': 4, 'sampling_steps': 250},
        'degrade': {'noise_std_min': 10, 'noise_std_max': 15, 'blur_kernels': [9, 11, 13, 15], 'blur_prob': 0.5},
        'denoise': {'mode': 'sdedit', 't_star': 100, 'noise_std': 25},
        'eval': {'metric': 'flicker'},
        'runtime': {'seed': 0, 'workers': 1},
        'logging': {'level': 'INFO', 'to_file': False, 'file_path': 'pipeline.log'},
    }


def merge_defaults(config):
    """Fill sections or keys missing from a user config with the defaults."""
    merged = get_default_config()
    for section, values in config.items():
        if isinstance(values, dict) and isinstance(merged.get(section), dict):
            merged[section].update(values)
        else:
            merged[section] = values
    return merged


def get_path(config, *keys, default=None):
    """
    Safely get nested config value

    Args:
        config (dict): Configuration dictionary
        *keys: Keys to traverse
        default: Default value if key not found

    Returns:
        Value from config or default
    """
    value = config
    for key in keys:
        if isinstance(value, dict):
            value = value.get(key)
            if value is None:
                return default
        else:
            return default
    return value if value is not None else default


def set_path(config, value, *keys):
    """Set a nested config value in place, creating sections as needed."""
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value
    return config


def config_digest(config) -> str:
    """SHA-256 of the canonical JSON form of a resolved config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    layout: GridLayout
    stage1: DenoiserConfig
    stage2: DenoiserConfig
    synth: SynthSpec
    degrade: DegradeParams
    training: TrainConfig
    T: int
    beta_start: float
    beta_end: float
    sigma_choice: str
    sampling_steps: int
    codec: str
    iterations: int
    interpolate: bool
    control_alpha: str
    sampler_log_every: int
    sr_scale: int
    sr_sampling_steps: int
    stride: int
    denoise_mode: str
    t_star: int
    denoise_noise_std: float
    metric: str
    seed: int
    workers: int
    output_dir: str
    stage1_checkpoint: str
    stage2_checkpoint: str
    digest: str

    def train_schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end, self.sigma_choice)

    def sampling_schedule(self, steps: Optional[int] = None) -> SamplingSchedule:
        return respace(self.train_schedule(), steps or self.sampling_steps)


def _require(condition: bool, key: str, message: str):
    if not condition:
        raise ConfigError(f"{key}: {message}")


def _build(section: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def build_run_config(config) -> RunConfig:
    """Validate a loaded config dict and turn it into a RunConfig."""
    try:
        return _build_run_config(config)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"config: malformed value ({e})") from e


def _build_run_config(config) -> RunConfig:
    cfg = merge_defaults(copy.deepcopy(config))
    g = lambda *keys: get_path(cfg, *keys)  # noqa: E731

    H, W = int(g('data', 'height')), int(g('data', 'width'))
    K, r = int(g('grid', 'K')), int(g('grid', 'r'))
    _require(K >= 1, 'grid.K', f"must be >= 1, got {K}")
    _require(0 <= r < K or K == 1, 'grid.r', f"must lie in [0, K), got {r}")
    _require(H % K == 0 and W % K == 0, 'grid.K', f"frame size {H}x{W} is not divisible by K={K}")
    _require(H == W, 'data.height', "frames must be square")
    layout = _build('grid', GridLayout.for_frames, K=K, r=r, height=H, width=W)

    codec_name = str(g('diffusion', 'codec'))
    try:
        codec = make_codec(codec_name)
    except ValueError as e:
        raise ConfigError(f"diffusion.codec: {e}") from e
    factor = codec.scale_factor
    _require(layout.element_h % factor == 0, 'diffusion.codec',
             f"element size {layout.element_h} is not divisible by codec factor {factor}")
    channels = codec.latent_channels(3)

    s1 = g('stage1')
    stage1 = _build('stage1', DenoiserConfig,
                    input_channels=channels, input_size=H // factor, patch=int(s1['patch']),
                    depth=int(s1['depth']), width=int(s1['width']), heads=int(s1['heads']),
                    conditional=False, pos_scheme=str(s1['pos_scheme']), grid_K=K)

    sr_scale = int(g('sr', 'scale'))
    _require(sr_scale >= 1, 'sr.scale', f"must be >= 1, got {sr_scale}")
    hr_size = layout.element_h * sr_scale
    _require(hr_size % factor == 0, 'sr.scale', f"refined size {hr_size} is not divisible by codec factor {factor}")
    s2 = g('stage2')
    stage2 = _build('stage2', DenoiserConfig,
                    input_channels=channels, input_size=hr_size // factor, patch=int(s2['patch']),
                    depth=int(s2['depth']), width=int(s2['width']), heads=int(s2['heads']),
                    conditional=True, pos_scheme=str(s2['pos_scheme']), grid_K=1,
                    adaln_cond=bool(s2.get('adaln_cond', False)))

    synth = _build('data', SynthSpec,
                   kind=str(g('data', 'kind')), n_sequences=int(g('data', 'n_sequences')),
                   n_frames=int(g('data', 'n_frames')), H=H, W=W, n_shapes=int(g('data', 'n_shapes')),
                   speed_range=(float(g('data', 'speed_min')), float(g('data', 'speed_max'))),
                   radius_range=(float(g('data', 'radius_min')), float(g('data', 'radius_max'))),
                   seed=int(g('runtime', 'seed')))

    degrade = _build('degrade', DegradeParams,
                     scale=sr_scale,
                     noise_std_range=(int(g('degrade', 'noise_std_min')), int(g('degrade', 'noise_std_max'))),
                     blur_kernels=tuple(int(k) for k in g('degrade', 'blur_kernels')),
                     blur_prob=float(g('degrade', 'blur_prob')), seed=int(g('runtime', 'seed')))

    tr = g('training')
    training = _build('training', TrainConfig,
                      steps=int(tr['steps']), batch_size=int(tr['batch_size']), lr_min=float(tr['lr_min']),
                      lr_max=float(tr['lr_max']), warmup_steps=int(tr['warmup_steps']),
                      weight_decay=float(tr['weight_decay']), log_every=int(tr['log_every']))

    T = int(g('diffusion', 'T'))
    beta_start, beta_end = float(g('diffusion', 'beta_start')), float(g('diffusion', 'beta_end'))
    _require(T >= 1, 'diffusion.T', f"must be >= 1, got {T}")
    _require(0 < beta_start <= beta_end < 1, 'diffusion.beta_start',
             f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    sigma_choice = str(g('diffusion', 'sigma_choice'))
    _require(sigma_choice in SIGMA_CHOICES, 'diffusion.sigma_choice', f"must be one of {SIGMA_CHOICES}")
    steps = int(g('diffusion', 'sampling_steps'))
    _require(1 <= steps <= T, 'diffusion.sampling_steps', f"must lie in [1, {T}], got {steps}")
    sr_steps = int(g('sr', 'sampling_steps'))
    _require(1 <= sr_steps <= T, 'sr.sampling_steps', f"must lie in [1, {T}], got {sr_steps}")

    iterations = int(g('sampler', 'iterations'))
    interpolate = bool(g('sampler', 'interpolate'))
    _require(iterations >= 1, 'sampler.iterations', f"must be >= 1, got {iterations}")
    _require(iterations == 1 or 0 < r < K, 'grid.r', f"autoregressive sampling needs 0 < r < K, got r={r}")
    _require(not (interpolate and iterations > 1 and K < 3), 'sampler.interpolate', "interpolation needs K >= 3")
    control_alpha = str(g('sampler', 'control_alpha'))
    _require(control_alpha in CONTROL_ALPHA_CHOICES, 'sampler.control_alpha',
             f"must be one of {CONTROL_ALPHA_CHOICES}")

    mode = str(g('denoise', 'mode'))
    _require(mode in ('sdedit', 'literal'), 'denoise.mode', f"must be sdedit or literal, got {mode}")
    t_star = int(g('denoise', 't_star'))
    _require(1 <= t_star <= T, 'denoise.t_star', f"must lie in [1, {T}], got {t_star}")
    noise_std = float(g('denoise', 'noise_std'))
    _require(noise_std >= 0, 'denoise.noise_std', "must be >= 0")

    metric = str(g('eval', 'metric'))
    _require(metric in ('flicker', 'psnr', 'ssim', 'proxy_fd'), 'eval.metric', f"unknown metric {metric}")
    stride = int(g('data', 'stride'))
    _require(stride >= 1, 'data.stride', f"must be >= 1, got {stride}")
    workers = int(g('runtime', 'workers'))
    _require(workers >= 1, 'runtime.workers', f"must be >= 1, got {workers}")

    return RunConfig(
        layout=layout, stage1=stage1, stage2=stage2, synth=synth, degrade=degrade, training=training,
        T=T, beta_start=beta_start, beta_end=beta_end, sigma_choice=sigma_choice, sampling_steps=steps,
        codec=codec_name, iterations=iterations, interpolate=interpolate, control_alpha=control_alpha,
        sampler_log_every=int(g('sampler', 'log_every') or 0), sr_scale=sr_scale, sr_sampling_steps=sr_steps,
        stride=stride, denoise_mode=mode, t_star=t_star, denoise_noise_std=noise_std, metric=metric,
        seed=int(g('runtime', 'seed')), workers=workers, output_dir=str(g('paths', 'output_dir')),
        stage1_checkpoint=str(g('paths', 'stage1_checkpoint')), stage2_checkpoint=str(g('paths', 'stage2_checkpoint')),
        digest=config_digest(cfg),
    )
