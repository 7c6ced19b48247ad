#!/usr/bin/env python3
"""
Numeric substrate: precision mode, checked tensors, reproducible noise,
gradients, FFT, bilinear resampling and the Adam update.

Tensor arithmetic and reverse-mode differentiation come from torch. What this
module adds is the project's conventions on top: 64-bit for verification,
finiteness checks, a Gaussian stream keyed by (seed, label) that replays the
same numbers on any machine, and a finite-difference gradient checker.
"""

import hashlib
import math
from typing import Callable, Iterable, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from errors import (CapabilityError, ConfigurationError, DimensionError,
                    InvariantError, OptimizerError)

PRECISIONS = {
    "float64": torch.float64,
    "float32": torch.float32,
}

# When True, as_tensor() rejects NaN/Inf
CHECKED = True


def set_precision(name: str) -> torch.dtype:
    """Set the default floating dtype ("float64" for tests, "float32" allowed for training)."""
    if name not in PRECISIONS:
        raise ConfigurationError(f"Unknown precision '{name}' (expected one of {sorted(PRECISIONS)})")
    dtype = PRECISIONS[name]
    torch.set_default_dtype(dtype)
    return dtype


def set_checked(flag: bool):
    global CHECKED
    CHECKED = bool(flag)


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if CHECKED and t.numel() and not bool(torch.isfinite(t).all()):
        raise InvariantError(f"{name} contains NaN or Inf")
    return t


def as_tensor(data, name: str = "tensor", dtype: torch.dtype = None) -> torch.Tensor:
    """Convert to a tensor of the default (or given) dtype, checking finiteness."""
    t = torch.as_tensor(data, dtype=dtype or torch.get_default_dtype())
    return check_finite(t, name)


class RngStream:
    """
    Reproducible random numbers keyed by (seed, label).

    Backed by numpy's Philox counter-based generator; Gaussians use the
    Box-Muller transform so the sequence does not depend on any library's
    normal sampler. Identical (seed, label) gives identical draws everywhere.
    """

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.blake2b(f"{self.seed}:{self.label}".encode("utf-8"), digest_size=16).digest()
        self._gen = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))
        self.index = 0

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r}, index={self.index})"

    def spawn(self, label: str) -> "RngStream":
        """Child stream; independent of how much the parent has drawn."""
        return RngStream(self.seed, f"{self.label}/{label}")

    def uniform(self, shape: Sequence[int]) -> torch.Tensor:
        n = int(np.prod(shape)) if len(shape) else 1
        values = self._gen.random(n)
        self.index += n
        return torch.as_tensor(values.reshape(tuple(shape)), dtype=torch.get_default_dtype())

    def normal(self, shape: Sequence[int]) -> torch.Tensor:
        n = int(np.prod(shape)) if len(shape) else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]
        u2 = self._gen.random(pairs)
        self.index += 2 * pairs
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return torch.as_tensor(z.reshape(tuple(shape)), dtype=torch.get_default_dtype())

    def randint(self, low: int, high: int, shape: Sequence[int]) -> torch.Tensor:
        """Integers in [low, high)."""
        values = self._gen.integers(low, high, size=tuple(shape))
        self.index += int(np.prod(shape)) if len(shape) else 1
        return torch.as_tensor(values, dtype=torch.long)

    def torch_generator(self) -> torch.Generator:
        """A torch.Generator seeded from this stream (for DataLoader shuffling)."""
        g = torch.Generator()
        g.manual_seed(int(self._gen.integers(0, 2**62)))
        self.index += 1
        return g


def gradient(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """
    Reverse-mode gradients of a scalar computation.

    Args:
        fn: Zero-argument callable returning a scalar tensor built from params
        params: Tensors with requires_grad=True

    Returns:
        One gradient per parameter (zeros where the parameter is unused)
    """
    value = fn()
    if value.numel() != 1:
        raise DimensionError(f"gradient() needs a scalar output, got shape {tuple(value.shape)}")
    if not value.requires_grad:
        raise CapabilityError("Output is not differentiable with respect to any parameter")
    try:
        grads = torch.autograd.grad(value.reshape(()), list(params), allow_unused=True)
    except RuntimeError as e:
        raise CapabilityError(f"Backward pass failed: {e}") from e
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def finite_difference_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                            step: float = 1e-5, coords_per_param: int = 3,
                            min_grad: float = 1e-6) -> float:
    """
    Compare reverse-mode gradients to central finite differences.

    For each parameter the coordinates with the largest analytic gradient are
    checked; error is |g - fd| / (|fd| + 1e-8).

    Returns:
        Largest relative error over all checked coordinates
    """
    analytic = gradient(fn, params)
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat_g = g.reshape(-1)
            if flat_g.numel() == 0 or float(flat_g.abs().max()) < min_grad:
                continue
            k = min(coords_per_param, flat_g.numel())
            for idx in torch.topk(flat_g.abs(), k).indices.tolist():
                if abs(float(flat_g[idx])) < min_grad:
                    continue
                flat_p = p.view(-1)
                original = flat_p[idx].item()
                flat_p[idx] = original + step
                plus = float(fn())
                flat_p[idx] = original - step
                minus = float(fn())
                flat_p[idx] = original
                fd = (plus - minus) / (2.0 * step)
                rel = abs(float(flat_g[idx]) - fd) / (abs(fd) + 1e-8)
                worst = max(worst, rel)
                checked += 1
    if checked == 0:
        raise CapabilityError("No coordinate had a measurable gradient to check")
    return worst


def bilinear_resize(img: torch.Tensor, target: Tuple[int, int]) -> torch.Tensor:
    """
    Half-pixel-center bilinear resample over the last two dimensions.

    Output pixel i reads source coordinate (i + 0.5) * r / H - 0.5, clamped
    to the image; same-size resizing returns the input values unchanged.
    """
    if img.dim() < 2:
        raise DimensionError("bilinear_resize needs at least a 2-D tensor")
    r, c = img.shape[-2], img.shape[-1]
    H, W = int(target[0]), int(target[1])
    if min(r, c, H, W) < 1:
        raise DimensionError(f"Cannot resize {r}x{c} to {H}x{W}")
    if (r, c) == (H, W):
        return img.clone()
    lead = img.shape[:-2]
    flat = img.reshape(-1, 1, r, c)
    out = F.interpolate(flat, size=(H, W), mode="bilinear", align_corners=False)
    return out.reshape(*lead, H, W)


def fft_full(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Full complex DFT along the last axis, returned as (real, imag)."""
    if x.dim() == 0 or x.shape[-1] == 0:
        raise DimensionError("fft_full needs a non-empty last dimension")
    spectrum = torch.fft.fft(x, dim=-1)
    return spectrum.real.contiguous(), spectrum.imag.contiguous()


class Adam:
    """
    Bias-corrected Adam over named parameters.

    Wraps torch.optim.Adam (or AdamW when weight decay is decoupled) and
    refuses to step on a non-finite gradient, naming the offending parameter.
    """

    def __init__(self, named_params: Iterable[Tuple[str, torch.nn.Parameter]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        pairs = [(n, p) for n, p in named_params if p.requires_grad]
        if not pairs:
            raise ConfigurationError("Optimizer has no trainable parameters")
        self.names = [n for n, _ in pairs]
        self.params = [p for _, p in pairs]
        cls = torch.optim.AdamW if decoupled else torch.optim.Adam
        self.optimizer = cls(self.params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        self.t = 0

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def step(self) -> int:
        """Apply one update in place and return the step index t (1-based)."""
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise OptimizerError(f"Non-finite gradient in parameter '{name}'", parameter=name)
        self.optimizer.step()
        self.t += 1
        return self.t

    def state_dict(self) -> dict:
        return {"t": self.t, "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state: dict):
        self.t = state["t"]
        self.optimizer.load_state_dict(state["optimizer"])
