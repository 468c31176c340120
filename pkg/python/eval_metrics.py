"""
Quantitative evaluation of generated sequences.

Metrics:
  flicker  - mean absolute difference between consecutive frames, 0-255 scale
  psnr     - 10*log10(1/MSE) on the [0, 1] scale
  ssim     - single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid region
  proxy_fd - Frechet distance between Gaussian fits of 16 hand-crafted features

Proxy feature vector (per [C, H, W] image, gray images replicated to RGB):
  [0:3]   channel means
  [3:7]   luminance means of the 2x2 quadrant blocks (TL, TR, BL, BR)
  [7]     mean gradient magnitude of the luminance (forward differences)
  [8:16]  normalised histogram of gradient magnitudes, bin edges
          0, .01, .02, .04, .08, .16, .32, .64, inf
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy import linalg

from seqgrid import Sequence

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

METRICS = ("flicker", "psnr", "ssim", "proxy_fd")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
GRAD_BIN_EDGES = (0.0, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64, math.inf)
FEATURE_NAMES = (
    ("mean_r", "mean_g", "mean_b")
    + ("quadrant_tl", "quadrant_tr", "quadrant_bl", "quadrant_br")
    + ("grad_mean",)
    + tuple(f"grad_hist_{i}" for i in range(len(GRAD_BIN_EDGES) - 1))
)
FEATURE_DIM = len(FEATURE_NAMES)
COV_EPS = 1e-6
MIN_FD_ITEMS = 8

Frames = Union[Sequence, torch.Tensor]


def _frames(seq: Frames) -> torch.Tensor:
    return seq.frames if isinstance(seq, Sequence) else seq


def flicker(seq: Frames) -> float:
    frames = _frames(seq).to(torch.float64)
    if frames.shape[0] < 2:
        raise ValueError(f"flicker needs at least 2 frames, got {frames.shape[0]}")
    diffs = (frames[1:] - frames[:-1]).abs() * 255.0
    return float(diffs.flatten(1).mean(dim=1).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB with peak 1.0; identical inputs give math.inf."""
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.to(torch.float64) - b.to(torch.float64)) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_image(a: torch.Tensor, b: torch.Tensor, L: float = 1.0) -> float:
    C = a.shape[0]
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    window = gaussian_window().expand(C, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x.unsqueeze(0), window, groups=C)[0]

    a, b = a.to(torch.float64), b.to(torch.float64)
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean local SSIM of [C, H, W] images, or the frame mean for [N, C, H, W] stacks."""
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(a.shape[-2:])}")
    if a.dim() == 3:
        return _ssim_image(a, b)
    return float(np.mean([_ssim_image(x, y) for x, y in zip(a, b)]))


def features(image: torch.Tensor) -> np.ndarray:
    """Hand-crafted feature vector of one [C, H, W] image, ordered as FEATURE_NAMES."""
    x = image.to(torch.float64)
    if x.shape[0] == 1:
        x = x.expand(3, -1, -1)
    _, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"Image too small for gradient features: {h}x{w}")
    lum = x.mean(dim=0)
    hh, hw = h // 2, w // 2
    quadrants = [lum[:hh, :hw], lum[:hh, hw:], lum[hh:, :hw], lum[hh:, hw:]]

    gx = lum[:-1, 1:] - lum[:-1, :-1]
    gy = lum[1:, :-1] - lum[:-1, :-1]
    mag = torch.sqrt(gx ** 2 + gy ** 2).reshape(-1).numpy()
    hist, _ = np.histogram(mag, bins=np.array(GRAD_BIN_EDGES))

    return np.concatenate([
        x.mean(dim=(1, 2)).numpy(),
        np.array([float(q.mean()) for q in quadrants]),
        np.array([mag.mean()]),
        hist / mag.size,
    ])


def fit_gaussian(feats: np.ndarray, eps: float = COV_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and regularised covariance of a [M, D] feature matrix."""
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError(f"Need a [M>=2, D] feature matrix, got shape {feats.shape}")
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False) + eps * np.eye(feats.shape[1])
    if np.linalg.eigvalsh(sigma).min() <= 0:
        raise ValueError("Feature covariance is degenerate after regularisation")
    return mu, sigma


def frechet_distance(mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray) -> float:
    diff = mu1 - mu2
    covmean = linalg.sqrtm(sigma1 @ sigma2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    fd = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean))
    return max(fd, 0.0)


def _items(items) -> List[torch.Tensor]:
    if isinstance(items, Sequence):
        return list(items.frames.unbind(0))
    if isinstance(items, torch.Tensor):
        return list(items.unbind(0))
    return list(items)


def proxy_fd(set_a, set_b) -> float:
    a, b = _items(set_a), _items(set_b)
    if len(a) < MIN_FD_ITEMS or len(b) < MIN_FD_ITEMS:
        raise ValueError(f"proxy_fd needs at least {MIN_FD_ITEMS} items per set, got {len(a)} and {len(b)}")
    mu_a, s_a = fit_gaussian(np.stack([features(x) for x in a]))
    mu_b, s_b = fit_gaussian(np.stack([features(x) for x in b]))
    return frechet_distance(mu_a, s_a, mu_b, s_b)


@dataclass
class EvalReport:
    metric: str
    value: Optional[float]
    n_items: int
    config_digest: str = ""
    infinite: bool = False

    def to_dict(self) -> Dict:
        return asdict(self)


def _report(metric: str, value: float, n_items: int, digest: str) -> EvalReport:
    if math.isinf(value):
        return EvalReport(metric=metric, value=None, n_items=n_items, config_digest=digest, infinite=True)
    return EvalReport(metric=metric, value=float(value), n_items=n_items, config_digest=digest)


def evaluate_sequences(sequences: Iterable[Frames], metrics: Iterable[str],
                       reference: Optional[Iterable[Frames]] = None, config_digest: str = "") -> List[EvalReport]:
    """
    One report per metric over a set of sequences.

    flicker is averaged over sequences; psnr and ssim compare each sequence
    with its reference frame by frame; proxy_fd pools all frames of each set.
    """
    seqs = [_frames(s) for s in sequences]
    refs = [_frames(s) for s in reference] if reference is not None else None
    if not seqs:
        raise ValueError("No sequences to evaluate")

    reports = []
    for metric in metrics:
        if metric not in METRICS:
            raise ValueError(f"Unknown metric '{metric}', expected one of {METRICS}")
        if metric == "flicker":
            value = float(np.mean([flicker(s) for s in seqs]))
            reports.append(_report(metric, value, len(seqs), config_digest))
            continue
        if refs is None:
            raise ValueError(f"Metric '{metric}' needs reference sequences")
        if metric == "proxy_fd":
            pooled_a = [f for s in seqs for f in s.unbind(0)]
            pooled_b = [f for s in refs for f in s.unbind(0)]
            reports.append(_report(metric, proxy_fd(pooled_a, pooled_b), len(pooled_a), config_digest))
            continue
        if len(refs) != len(seqs):
            raise ValueError(f"Got {len(seqs)} sequences but {len(refs)} references")
        fn = psnr if metric == "psnr" else ssim
        values = [fn(s, r) for s, r in zip(seqs, refs)]
        value = math.inf if all(math.isinf(v) for v in values) else float(np.mean([v for v in values if not math.isinf(v)]))
        reports.append(_report(metric, value, len(seqs), config_digest))
    for r in reports:
        logger.info("%s = %s over %d items", r.metric, "inf" if r.infinite else f"{r.value:.4f}", r.n_items)
    return reports


def report_to_frame(reports: List[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in reports], columns=["metric", "value", "n_items", "config_digest", "infinite"])


def write_report(reports: List[EvalReport], output_path: str, extra: Optional[Dict] = None) -> str:
    """Write reports as JSON, plus a CSV table next to it."""
    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    payload = dict(extra or {})
    payload["reports"] = [r.to_dict() for r in reports]
    with open(output_path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    report_to_frame(reports).to_csv(os.path.splitext(output_path)[0] + ".csv", index=False)
    logger.info("Evaluation report saved to %s", output_path)
    return output_path
