#!/usr/bin/env python3
"""
Diffusion algebra on latents: schedules, the closed-form forward process,
DDPM and DDIM reverse steps, sampling loops, the noise-prediction loss and
latent-scale calibration.

Timesteps are 1-based (1..T); alpha_bar(0) is 1 by convention.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import torch

from errors import CalibrationError, ConfigurationError, ScheduleIndexError
from numerics import RngStream

SCHEDULE_KINDS = ("linear", "scaled_linear")

# eps_model(z_t, t, cond) -> predicted noise, t is a LongTensor of shape (B,)
EpsModel = Callable[[torch.Tensor, torch.Tensor, Optional[torch.Tensor]], torch.Tensor]

# one stream for the whole batch, or one per batch item
NoiseSource = Union[RngStream, Sequence[RngStream]]


def draw_normal(rng: NoiseSource, shape: Sequence[int]) -> torch.Tensor:
    """Standard normal noise; with per-item streams row b comes from rng[b] alone."""
    if isinstance(rng, RngStream):
        return rng.normal(tuple(shape))
    if len(rng) != shape[0]:
        raise ConfigurationError(f"Got {len(rng)} noise streams for a batch of {shape[0]}")
    return torch.stack([r.normal(tuple(shape[1:])) for r in rng])


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: Union[int, torch.Tensor]) -> torch.Tensor:
        """ᾱ_t for t in 0..T (ᾱ_0 = 1)."""
        padded = torch.cat([torch.ones(1, dtype=self.alpha_bars.dtype), self.alpha_bars])
        return padded[torch.as_tensor(t, dtype=torch.long)]

    def beta(self, t: Union[int, torch.Tensor]) -> torch.Tensor:
        return self.betas[torch.as_tensor(t, dtype=torch.long) - 1]

    def alpha(self, t: Union[int, torch.Tensor]) -> torch.Tensor:
        return self.alphas[torch.as_tensor(t, dtype=torch.long) - 1]

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "num_timesteps": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def build_schedule(T: int = 300, beta_start: float = 0.00085, beta_end: float = 0.012,
                   kind: str = "scaled_linear") -> NoiseSchedule:
    """
    Linear: betas evenly spaced. Scaled linear: sqrt(beta) evenly spaced, then squared.
    Always built in 64-bit so the cumulative product is exact to double precision.
    """
    if kind not in SCHEDULE_KINDS:
        raise ConfigurationError(f"Unknown schedule kind {kind!r} (expected {SCHEDULE_KINDS})")
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")

    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=torch.float64) ** 2
    if T > 1:
        # endpoints must match the configured values bit for bit
        betas[0] = beta_start if kind == "linear" else (beta_start ** 0.5) ** 2
        betas[-1] = beta_end if kind == "linear" else (beta_end ** 0.5) ** 2
    alphas = 1.0 - betas
    alpha_bars = torch.empty_like(alphas)
    running = 1.0
    for i, a in enumerate(alphas.tolist()):
        running *= a
        alpha_bars[i] = running
    return NoiseSchedule(kind, betas, alphas, alpha_bars)


def _coef(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-batch coefficient against a latent tensor."""
    values = values.to(like.dtype)
    if values.dim() == 0:
        return values
    return values.reshape(-1, *([1] * (like.dim() - 1)))


def _check_t(t: Union[int, torch.Tensor], sched: NoiseSchedule, low: int = 1):
    tt = torch.as_tensor(t)
    if tt.numel() and (int(tt.min()) < low or int(tt.max()) > sched.T):
        raise ScheduleIndexError(f"Timestep out of range [{low}, {sched.T}]: {tt.tolist()}")


def forward_sample(z0: torch.Tensor, t: Union[int, torch.Tensor], eps: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps."""
    _check_t(t, sched)
    if eps.shape != z0.shape:
        raise ScheduleIndexError(f"Noise shape {tuple(eps.shape)} differs from latent {tuple(z0.shape)}")
    ab = _coef(sched.alpha_bar(t), z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def forward_step(z_prev: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One Markov step z_{t-1} -> z_t = sqrt(α_t) z_{t-1} + sqrt(β_t) eps."""
    _check_t(t, sched)
    return math.sqrt(float(sched.alpha(t))) * z_prev + math.sqrt(float(sched.beta(t))) * eps


def predict_z0(z_t: torch.Tensor, t: Union[int, torch.Tensor], eps_hat: torch.Tensor,
               sched: NoiseSchedule) -> torch.Tensor:
    """ẑ0 = (z_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)."""
    _check_t(t, sched)
    ab = _coef(sched.alpha_bar(t), z_t)
    return (z_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)


def posterior_variance(t: int, sched: NoiseSchedule) -> float:
    """σ_t² = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t; zero at t = 1."""
    if t == 1:
        return 0.0
    ab_t = float(sched.alpha_bar(t))
    ab_prev = float(sched.alpha_bar(t - 1))
    return (1.0 - ab_prev) / (1.0 - ab_t) * float(sched.beta(t))


def ddpm_step(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule,
              rng: Optional[NoiseSource] = None, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Ancestral step z_t -> z_{t-1}; noise is drawn from rng unless given (no noise at t = 1)."""
    _check_t(t, sched)
    alpha_t = float(sched.alpha(t))
    ab_t = float(sched.alpha_bar(t))
    mean = (z_t - (1.0 - alpha_t) / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha_t)
    if t == 1:
        return mean
    if noise is None:
        if rng is None:
            raise ConfigurationError("ddpm_step needs an RngStream or explicit noise for t > 1")
        noise = draw_normal(rng, z_t.shape).to(z_t.dtype)
    return mean + math.sqrt(posterior_variance(t, sched)) * noise


def ddim_step(z_t: torch.Tensor, t: int, t_prev: int, eps_hat: torch.Tensor,
              sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic jump z_t -> z_{t_prev}, 0 <= t_prev < t <= T."""
    if not (0 <= t_prev < t <= sched.T):
        raise ScheduleIndexError(f"DDIM needs 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_prev = float(sched.alpha_bar(t_prev))
    z0_hat = predict_z0(z_t, t, eps_hat, sched)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(T: int, steps: int) -> List[int]:
    """
    Exactly `steps` descending timesteps from T with a uniform stride; the walk ends at 0.

    The stride is ceil(T / steps) when that still fits above 0, otherwise
    floor(T / steps).
    """
    if not (1 <= steps <= T):
        raise ConfigurationError(f"Inference steps must be in [1, {T}], got {steps}")
    stride = math.ceil(T / steps)
    if T - (steps - 1) * stride < 1:
        stride = T // steps
    return [T - i * stride for i in range(steps)]


def sample_loop(shape: Sequence[int], cond: Optional[torch.Tensor], eps_model: EpsModel,
                sched: NoiseSchedule, sampler: str = "ddim", steps: int = 50,
                rng: Optional[NoiseSource] = None, z_T: Optional[torch.Tensor] = None,
                callback: Optional[Callable[[int, torch.Tensor, torch.Tensor], None]] = None) -> torch.Tensor:
    """
    Reverse-diffuse from Gaussian noise to a clean latent.

    ddim visits ddim_timesteps(T, steps) then jumps to 0; ddpm walks T..1.
    callback(t, z_t, eps_hat) is invoked before every step.
    """
    if sampler not in ("ddim", "ddpm"):
        raise ConfigurationError(f"Unknown sampler {sampler!r}")
    if z_T is None:
        if rng is None:
            raise ConfigurationError("sample_loop needs an RngStream or a starting latent")
        z_T = draw_normal(rng, shape)
    z = z_T
    B = z.shape[0]

    if sampler == "ddim":
        ts = ddim_timesteps(sched.T, steps)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps_hat = eps_model(z, torch.full((B,), t, dtype=torch.long), cond)
            if callback is not None:
                callback(t, z, eps_hat)
            z = ddim_step(z, t, t_prev, eps_hat, sched)
        return z

    for t in range(sched.T, 0, -1):
        eps_hat = eps_model(z, torch.full((B,), t, dtype=torch.long), cond)
        if callback is not None:
            callback(t, z, eps_hat)
        z = ddpm_step(z, t, eps_hat, sched, rng=rng)
    return z


@dataclass
class DiffusionTerms:
    loss: torch.Tensor
    t: torch.Tensor
    z_t: torch.Tensor
    eps: torch.Tensor
    eps_hat: torch.Tensor


def diffusion_terms(z0: torch.Tensor, cond: Optional[torch.Tensor], eps_model: EpsModel,
                    sched: NoiseSchedule, rng: RngStream) -> DiffusionTerms:
    """Sample t ~ U{1..T} per item and ε ~ N(0, I); return the loss plus intermediates."""
    B = z0.shape[0]
    t = rng.randint(1, sched.T + 1, (B,))
    eps = rng.normal(tuple(z0.shape)).to(z0.dtype)
    z_t = forward_sample(z0, t, eps, sched)
    eps_hat = eps_model(z_t, t, cond)
    loss = ((eps - eps_hat) ** 2).mean()
    return DiffusionTerms(loss, t, z_t, eps, eps_hat)


def diffusion_loss(z0: torch.Tensor, cond: Optional[torch.Tensor], eps_model: EpsModel,
                   sched: NoiseSchedule, rng: RngStream) -> torch.Tensor:
    return diffusion_terms(z0, cond, eps_model, sched, rng).loss


def calibrate_scale(latents: torch.Tensor) -> float:
    """s = 1 / std over every latent entry (population std)."""
    if latents.dim() == 0 or latents.shape[0] < 2:
        raise CalibrationError("Need at least 2 latent samples to calibrate the scale")
    sigma = float(latents.detach().to(torch.float64).std(unbiased=False))
    if not math.isfinite(sigma) or sigma == 0.0:
        raise CalibrationError(f"Latent standard deviation is {sigma}; cannot calibrate")
    return 1.0 / sigma
