#!/usr/bin/env python3
"""
Turn normalized look-back windows into three-channel images.

Channels, in fixed order:
- SEG: the series folded into a (periods × period) grid
- GAF: Gramian angular field of the min-max scaled series
- RP:  recurrence plot (Gaussian kernel, or thresholded phase-space distances)

Every channel lands in [0, 1] at the configured image size.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from errors import ConfigurationError, DimensionError, InvariantError
from numerics import bilinear_resize
from series_data import instance_normalize

CHANNELS = ("seg", "gaf", "rp")
GAF_METHODS = ("summation", "difference")
RP_VARIANTS = ("gaussian", "heaviside")


@dataclass
class VisionConfig:
    period: int = 24
    image_size: Tuple[int, int] = (64, 64)
    epsilon: float = 1e-8
    gaf_method: str = "summation"
    rp_variant: str = "gaussian"
    rp_embed: int = 1
    rp_delay: int = 1
    rp_threshold: Optional[float] = None  # None: median pairwise distance

    def __post_init__(self):
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(int(s) for s in self.image_size)
        if int(self.period) < 1:
            raise ConfigurationError(f"period must be >= 1, got {self.period}")
        if min(self.image_size) < 1:
            raise ConfigurationError(f"image_size must be positive, got {self.image_size}")
        if self.gaf_method not in GAF_METHODS:
            raise ConfigurationError(f"gaf_method must be one of {GAF_METHODS}, got {self.gaf_method!r}")
        if self.rp_variant not in RP_VARIANTS:
            raise ConfigurationError(f"rp_variant must be one of {RP_VARIANTS}, got {self.rp_variant!r}")
        if self.rp_embed < 1 or self.rp_delay < 1:
            raise ConfigurationError(f"rp_embed and rp_delay must be >= 1, got m={self.rp_embed}, tau={self.rp_delay}")

    @classmethod
    def from_config(cls, cfg: Dict, period: int = None) -> "VisionConfig":
        return cls(
            period=int(period if period is not None else cfg["vision.period"]),
            image_size=int(cfg["vision.image_size"]),
            epsilon=float(cfg["vision.epsilon"]),
            gaf_method=cfg["vision.gaf_method"],
            rp_variant=cfg["vision.rp_variant"],
            rp_embed=int(cfg["vision.rp_embed"]),
            rp_delay=int(cfg["vision.rp_delay"]),
            rp_threshold=cfg["vision.rp_threshold"],
        )


def minmax_normalize(x: torch.Tensor, epsilon: float = 1e-8) -> torch.Tensor:
    """(x - min) / (max - min + eps) along the last axis; a constant series maps to zeros."""
    lo = x.min(dim=-1, keepdim=True).values
    hi = x.max(dim=-1, keepdim=True).values
    return (x - lo) / (hi - lo + epsilon)


def _channel_minmax(grid: torch.Tensor, epsilon: float) -> torch.Tensor:
    flat = grid.reshape(*grid.shape[:-2], -1)
    return minmax_normalize(flat, epsilon).reshape(grid.shape)


def seg_grid(X: torch.Tensor, period: int) -> torch.Tensor:
    """Left-pad each feature with zeros to a multiple of period and fold: B×D×(periods)×period."""
    B, L, D = X.shape
    pad = (-L) % period
    series = X.permute(0, 2, 1)
    if pad:
        series = F.pad(series, (pad, 0))
    return series.reshape(B, D, (L + pad) // period, period)


def seg_encode(X: torch.Tensor, cfg: VisionConfig) -> torch.Tensor:
    _check_window(X)
    grid = bilinear_resize(seg_grid(X, cfg.period), cfg.image_size)
    grid = _channel_minmax(grid, cfg.epsilon)
    return grid.mean(dim=1).clamp(0.0, 1.0)


def gaf_matrix(X: torch.Tensor, cfg: VisionConfig) -> torch.Tensor:
    """Feature-averaged Gramian angular field before resizing, values in [-1, 1]."""
    x_tilde = minmax_normalize(X.permute(0, 2, 1), cfg.epsilon).clamp(0.0, 1.0)
    theta = torch.arccos(x_tilde)
    if cfg.gaf_method == "summation":
        G = torch.cos(theta[..., :, None] + theta[..., None, :])
    else:
        G = torch.cos(theta[..., :, None] - theta[..., None, :])
    return G.mean(dim=1)


def gaf_encode(X: torch.Tensor, cfg: VisionConfig) -> torch.Tensor:
    _check_window(X)
    G = bilinear_resize(gaf_matrix(X, cfg), cfg.image_size)
    return ((G + 1.0) / 2.0).clamp(0.0, 1.0)


def _pairwise_sq_dist(V: torch.Tensor) -> torch.Tensor:
    diff = V[:, :, None, :] - V[:, None, :, :]
    return (diff * diff).sum(dim=-1)


def rp_matrix(X: torch.Tensor, cfg: VisionConfig) -> torch.Tensor:
    """Recurrence matrix before resizing: B×L×L (Gaussian) or B×L'×L' (Heaviside)."""
    if cfg.rp_variant == "gaussian":
        return torch.exp(-_pairwise_sq_dist(X) / 2.0)

    B, L, D = X.shape
    m, tau = cfg.rp_embed, cfg.rp_delay
    n = L - (m - 1) * tau
    if n < 1:
        raise ConfigurationError(f"Embedding m={m}, tau={tau} does not fit a window of length {L}")
    vectors = torch.cat([X[:, k * tau:k * tau + n, :] for k in range(m)], dim=-1)
    dist = torch.sqrt(_pairwise_sq_dist(vectors))
    if cfg.rp_threshold is not None:
        threshold = torch.full((B, 1, 1), float(cfg.rp_threshold), dtype=dist.dtype)
    elif n > 1:
        iu = torch.triu_indices(n, n, offset=1)
        threshold = dist[:, iu[0], iu[1]].median(dim=-1).values.reshape(B, 1, 1)
    else:
        threshold = torch.zeros(B, 1, 1, dtype=dist.dtype)
    return (dist <= threshold).to(X.dtype)


def rp_encode(X: torch.Tensor, cfg: VisionConfig) -> torch.Tensor:
    _check_window(X)
    return bilinear_resize(rp_matrix(X, cfg), cfg.image_size).clamp(0.0, 1.0)


def compose_image(seg: torch.Tensor, gaf: torch.Tensor, rp: torch.Tensor) -> torch.Tensor:
    """Stack channels as [SEG; GAF; RP] along a new channel axis (dim -3)."""
    if not (seg.shape == gaf.shape == rp.shape):
        raise DimensionError(f"Channel shapes differ: {tuple(seg.shape)}, {tuple(gaf.shape)}, {tuple(rp.shape)}")
    image = torch.stack([seg, gaf, rp], dim=-3)
    check_pixel_range(image)
    return image


def check_pixel_range(image: torch.Tensor):
    if image.numel() and (float(image.min()) < 0.0 or float(image.max()) > 1.0 or not bool(torch.isfinite(image).all())):
        raise InvariantError(
            f"Pixel values must lie in [0, 1], found [{float(image.min())}, {float(image.max())}]")


def encode_window(X_norm: torch.Tensor, cfg: VisionConfig) -> torch.Tensor:
    """B×L×D normalized windows -> B×3×H×W image."""
    return compose_image(seg_encode(X_norm, cfg), gaf_encode(X_norm, cfg), rp_encode(X_norm, cfg))


def build_images(X: torch.Tensor, cfg: VisionConfig, norm_const: float = 1.0) -> torch.Tensor:
    """Instance-normalize raw windows (divisor scaled by norm_const) and encode them."""
    X_img, _ = instance_normalize(X, norm_const)
    return encode_window(X_img, cfg)


def _check_window(X: torch.Tensor):
    if X.dim() != 3 or X.shape[1] < 1 or X.shape[2] < 1:
        raise DimensionError(f"Expected a non-empty B×L×D window, got {tuple(X.shape)}")


def period_objective(x: np.ndarray, k: int) -> float:
    """
    Sum of Pearson correlations between adjacent columns of the series folded
    into rows of length k (oldest partial period dropped). Constant columns
    contribute 0.
    """
    x = np.asarray(x, dtype=float).ravel()
    rows = len(x) // k
    M = x[len(x) - rows * k:].reshape(rows, k)
    left, right = M[:, :-1], M[:, 1:]
    a = left - left.mean(axis=0)
    b = right - right.mean(axis=0)
    num = (a * b).sum(axis=0)
    den = np.sqrt((a * a).sum(axis=0) * (b * b).sum(axis=0))
    flat = (np.ptp(left, axis=0) == 0) | (np.ptp(right, axis=0) == 0) | (den == 0)
    corr = np.where(flat, 0.0, num / np.where(flat, 1.0, den))
    return float(corr.sum())


def select_period(x, candidates: Iterable[int]) -> int:
    """Candidate period with the largest adjacent-column correlation; ties go to the smallest."""
    candidates = sorted({int(k) for k in candidates})
    if not candidates:
        raise ConfigurationError("select_period needs at least one candidate")
    x = np.asarray(x, dtype=float).ravel()
    for k in candidates:
        if k < 1 or len(x) < 2 * k:
            raise ConfigurationError(f"Candidate period {k} needs at least {2 * k} points, series has {len(x)}")
    best, best_score = candidates[0], period_objective(x, candidates[0])
    for k in candidates[1:]:
        score = period_objective(x, k)
        if score > best_score:
            best, best_score = k, score
    return best


def quantize(image: torch.Tensor) -> np.ndarray:
    """[0, 1] floats -> uint8 with round-half-up."""
    return np.floor(image.detach().cpu().numpy().astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def export_png(images: torch.Tensor, directory, split: str = "all", start_index: int = 0) -> List[Path]:
    """
    Write one RGB PNG (R=SEG, G=GAF, B=RP) and three grayscale PNGs per image.

    Files are named {split}_{index}_{channel}.png with channel in rgb/seg/gaf/rp.
    """
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[1] != 3:
        raise DimensionError(f"Expected B×3×H×W images, got {tuple(images.shape)}")
    check_pixel_range(images)

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for b, pixels in enumerate(quantize(images)):
        index = start_index + b
        rgb_path = directory / f"{split}_{index}_rgb.png"
        Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(rgb_path)
        written.append(rgb_path)
        for c, channel in enumerate(CHANNELS):
            path = directory / f"{split}_{index}_{channel}.png"
            Image.fromarray(np.ascontiguousarray(pixels[c])).save(path)
            written.append(path)
    return written
