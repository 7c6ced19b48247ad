#!/usr/bin/env python3
"""
Trainable networks: image autoencoder, conditional U-Net denoiser, patch
transformer temporal encoder, vision head and gated fusion.
"""

import math
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigurationError, DimensionError, ValidationError
from numerics import RngStream


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(_groups(channels), channels)


def init_weights(module: nn.Module):
    """Truncated normal (std 0.02) for linear/conv weights, zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def zero_init(layer: nn.Linear):
    """Output projections start at zero so a fresh head predicts the instance mean."""
    nn.init.zeros_(layer.weight)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


def _check_heads(width: int, n_heads: int, where: str):
    if width % n_heads != 0:
        raise ConfigurationError(f"{where}: n_heads={n_heads} must divide width {width}")


# ---------------------------------------------------------------------------
# Autoencoder
# ---------------------------------------------------------------------------

class TinyVAE(nn.Module):
    """
    3×S×S images <-> C_z×(S/8)×(S/8) diagonal-Gaussian latents.

    Pixels in [0, 1] are mapped to [-1, 1] on the way in; decode() clamps back
    into [0, 1].
    """

    def __init__(self, image_size: int = 64, latent_channels: int = 4,
                 channels: Sequence[int] = (32, 64, 64), kl_weight: float = 1e-6):
        super().__init__()
        if image_size % 8 != 0:
            raise ConfigurationError(f"image_size must be a multiple of 8, got {image_size}")
        self.image_size = image_size
        self.latent_channels = latent_channels
        self.kl_weight = kl_weight

        layers = [nn.Conv2d(3, channels[0], 3, padding=1)]
        prev = channels[0]
        for c in channels:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), group_norm(c), nn.SiLU()]
            prev = c
        layers.append(nn.Conv2d(prev, 2 * latent_channels, 1))
        self.encoder = nn.Sequential(*layers)

        layers = [nn.Conv2d(latent_channels, channels[-1], 3, padding=1), group_norm(channels[-1]), nn.SiLU()]
        prev = channels[-1]
        for c in reversed(channels):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(prev, c, 3, padding=1),
                       group_norm(c), nn.SiLU()]
            prev = c
        layers.append(nn.Conv2d(prev, 3, 3, padding=1))
        self.decoder = nn.Sequential(*layers)
        init_weights(self)

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        s = self.image_size // 8
        return (self.latent_channels, s, s)

    def encode(self, img: torch.Tensor, noise: Optional[torch.Tensor] = None,
               rng: Optional[RngStream] = None):
        """
        Returns:
            (mean, logvar, z); z is the reparameterized sample, or the mean
            when neither noise nor rng is given
        """
        expected = (3, self.image_size, self.image_size)
        if img.dim() != 4 or tuple(img.shape[1:]) != expected:
            raise DimensionError(f"Expected B×{expected[0]}×{expected[1]}×{expected[2]} images, got {tuple(img.shape)}")
        moments = self.encoder(img * 2.0 - 1.0)
        mean, logvar = moments.chunk(2, dim=1)
        logvar = logvar.clamp(-30.0, 20.0)
        if noise is None and rng is not None:
            noise = rng.normal(tuple(mean.shape)).to(mean.dtype)
        z = mean if noise is None else mean + torch.exp(0.5 * logvar) * noise
        return mean, logvar, z

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or tuple(z.shape[1:]) != self.latent_shape:
            raise DimensionError(f"Expected B×{self.latent_shape} latents, got {tuple(z.shape)}")
        return (self.decoder(z) + 1.0) / 2.0

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)

    def loss(self, img: torch.Tensor, noise: Optional[torch.Tensor] = None,
             rng: Optional[RngStream] = None):
        """Reconstruction MSE + kl_weight · KL; returns (total, recon, kl)."""
        mean, logvar, z = self.encode(img, noise=noise, rng=rng)
        recon = F.mse_loss(self.decode_raw(z), img)
        kl = -0.5 * torch.mean(1.0 + logvar - mean ** 2 - logvar.exp())
        return recon + self.kl_weight * kl, recon, kl


def vae_encode(vae: TinyVAE, img: torch.Tensor, noise: Optional[torch.Tensor] = None):
    return vae.encode(img, noise=noise)


def vae_decode(vae: TinyVAE, z: torch.Tensor) -> torch.Tensor:
    return vae.decode(z)


# ---------------------------------------------------------------------------
# Conditional U-Net
# ---------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps: [cos(t·f), sin(t·f)]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.get_default_dtype()) / half)
    args = t.to(freqs.dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Optional self-attention, cross-attention to c_m, then a feed-forward, all residual."""

    def __init__(self, channels: int, d_cond: int, n_heads: int, self_attention: bool = False):
        super().__init__()
        _check_heads(channels, n_heads, "U-Net attention")
        self.norm_in = group_norm(channels)
        self.self_attention = self_attention
        if self_attention:
            self.ln_self = nn.LayerNorm(channels)
            self.attn_self = nn.MultiheadAttention(channels, n_heads, batch_first=True)
        self.ln_cross = nn.LayerNorm(channels)
        self.attn_cross = nn.MultiheadAttention(channels, n_heads, kdim=d_cond, vdim=d_cond, batch_first=True)
        self.ln_ff = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        h = self.norm_in(x).flatten(2).transpose(1, 2)
        if self.self_attention:
            q = self.ln_self(h)
            h = h + self.attn_self(q, q, q, need_weights=False)[0]
        h = h + self.attn_cross(self.ln_cross(h), context, context, need_weights=False)[0]
        h = h + self.ff(self.ln_ff(h))
        return x + h.transpose(1, 2).reshape(B, C, H, W)


class UNet(nn.Module):
    """
    ε_θ(z_t, t, c_m): shape-preserving noise predictor.

    Per resolution level: ResBlock + cross-attention, saved as a projected
    skip, then a stride-2 downsample. The bottleneck (lowest resolution) has
    self- and cross-attention between two ResBlocks. The up path upsamples,
    concatenates the skip and mirrors the down path.
    """

    def __init__(self, latent_channels: int = 4, channels: int = 256, layers: int = 1,
                 d_cond: int = 256, n_heads: int = 8):
        super().__init__()
        if layers < 1:
            raise ConfigurationError(f"U-Net needs at least one level, got {layers}")
        self.channels = channels
        self.d_cond = d_cond
        temb_dim = 2 * channels
        self.time_mlp = nn.Sequential(nn.Linear(channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(latent_channels, channels, 3, padding=1)

        self.down_res = nn.ModuleList([ResBlock(channels, channels, temb_dim) for _ in range(layers)])
        self.down_attn = nn.ModuleList([AttentionBlock(channels, d_cond, n_heads) for _ in range(layers)])
        self.skip_proj = nn.ModuleList([nn.Conv2d(channels, channels, 1) for _ in range(layers)])
        self.downsample = nn.ModuleList([nn.Conv2d(channels, channels, 3, stride=2, padding=1)
                                         for _ in range(layers)])

        self.mid_res1 = ResBlock(channels, channels, temb_dim)
        self.mid_attn = AttentionBlock(channels, d_cond, n_heads, self_attention=True)
        self.mid_res2 = ResBlock(channels, channels, temb_dim)

        self.up_res = nn.ModuleList([ResBlock(2 * channels, channels, temb_dim) for _ in range(layers)])
        self.up_attn = nn.ModuleList([AttentionBlock(channels, d_cond, n_heads) for _ in range(layers)])

        self.norm_out = group_norm(channels)
        self.conv_out = nn.Conv2d(channels, latent_channels, 3, padding=1)
        init_weights(self)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, c_m: Optional[torch.Tensor],
                bypass_bottleneck: bool = False) -> torch.Tensor:
        if c_m is None:
            raise ValidationError("U-Net needs the condition c_m")
        if c_m.shape != (z_t.shape[0], self.d_cond):
            raise DimensionError(f"Expected c_m of shape ({z_t.shape[0]}, {self.d_cond}), got {tuple(c_m.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.channels).to(z_t.dtype))
        context = c_m.unsqueeze(1)

        h = self.conv_in(z_t)
        skips = []
        for res, attn, proj, down in zip(self.down_res, self.down_attn, self.skip_proj, self.downsample):
            h = attn(res(h, temb), context)
            skips.append(proj(h))
            h = down(h)

        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), context), temb)
        if bypass_bottleneck:
            h = torch.zeros_like(h)

        for res, attn in zip(self.up_res, self.up_attn):
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = attn(res(torch.cat([h, skip], dim=1), temb), context)

        return self.conv_out(F.silu(self.norm_out(h)))


def unet_predict_noise(unet: UNet, z_t: torch.Tensor, t: torch.Tensor, c_m: torch.Tensor) -> torch.Tensor:
    return unet(z_t, t, c_m)


# ---------------------------------------------------------------------------
# Temporal encoder
# ---------------------------------------------------------------------------

class PreNormBlock(nn.Module):
    """h' = h + MSA(LN(h)); h = h' + MLP(LN(h'))."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        _check_heads(d_model, n_heads, "Temporal encoder")
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        q = self.ln1(h)
        h = h + self.attn(q, q, q, need_weights=False)[0]
        return h + self.mlp(self.ln2(h))


class TemporalEncoder(nn.Module):
    """
    Channel-independent patch transformer: B×L×D -> B×L_pred×D.

    Each feature is padded at the end by replicating its last value, cut into
    overlapping patches, embedded, run through pre-norm blocks, flattened and
    projected to the horizon.
    """

    def __init__(self, seq_len: int, pred_len: int, patch_len: int = 16, stride: int = 8,
                 padding: int = 8, d_model: int = 256, n_heads: int = 8, e_layers: int = 2,
                 d_ff: int = 768):
        super().__init__()
        if seq_len < patch_len:
            raise ConfigurationError(f"seq_len={seq_len} is shorter than patch_len={patch_len}")
        if stride < 1 or padding < 0:
            raise ConfigurationError(f"Invalid stride={stride} or padding={padding}")
        self.seq_len = seq_len
        self.pred_len = pred_len
        self.patch_len = patch_len
        self.stride = stride
        self.padding = padding
        self.n_patches = (seq_len + padding - patch_len) // stride + 1

        self.pad = nn.ReplicationPad1d((0, padding))
        self.patch_embed = nn.Linear(patch_len, d_model)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_patches, d_model))
        self.blocks = nn.ModuleList([PreNormBlock(d_model, n_heads, d_ff) for _ in range(e_layers)])
        self.head = nn.Linear(self.n_patches * d_model, pred_len)
        init_weights(self)
        zero_init(self.head)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def patches(self, X: torch.Tensor) -> torch.Tensor:
        B, L, D = X.shape
        series = X.permute(0, 2, 1).reshape(B * D, 1, L)
        if self.padding:
            series = self.pad(series)
        return series.squeeze(1).unfold(-1, self.patch_len, self.stride)

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        if X.dim() != 3 or X.shape[1] != self.seq_len:
            raise ConfigurationError(f"Expected B×{self.seq_len}×D input, got {tuple(X.shape)}")
        B, _, D = X.shape
        h = self.patch_embed(self.patches(X)) + self.pos_embed
        for block in self.blocks:
            h = block(h)
        out = self.head(h.flatten(1))
        return out.reshape(B, D, self.pred_len).permute(0, 2, 1)


def temporal_encode(encoder: TemporalEncoder, X_norm: torch.Tensor) -> torch.Tensor:
    return encoder(X_norm)


# ---------------------------------------------------------------------------
# Vision head and gated fusion
# ---------------------------------------------------------------------------

class VisionHead(nn.Module):
    """Two stride-2 conv blocks, flatten, linear to L_pred·D."""

    def __init__(self, pred_len: int, n_features: int, image_size: int = 64,
                 channels: Sequence[int] = (16, 32)):
        super().__init__()
        self.pred_len = pred_len
        self.n_features = n_features
        self.image_size = image_size
        self.features = nn.Sequential(
            nn.Conv2d(3, channels[0], 3, stride=2, padding=1), group_norm(channels[0]), nn.SiLU(),
            nn.Conv2d(channels[0], channels[1], 3, stride=2, padding=1), group_norm(channels[1]), nn.SiLU(),
        )
        side = (((image_size + 1) // 2) + 1) // 2
        self.proj = nn.Linear(channels[1] * side * side, pred_len * n_features)
        init_weights(self)
        zero_init(self.proj)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        expected = (3, self.image_size, self.image_size)
        if img.dim() != 4 or tuple(img.shape[1:]) != expected:
            raise DimensionError(f"Expected B×{expected} images, got {tuple(img.shape)}")
        out = self.proj(self.features(img).flatten(1))
        return out.reshape(img.shape[0], self.pred_len, self.n_features)


def vision_head(head: VisionHead, img_rec: torch.Tensor) -> torch.Tensor:
    return head(img_rec)


class GatedFusion(nn.Module):
    """Ŷ = g ⊙ Z_TE + (1 - g) ⊙ Z_VE with g = sigmoid(MLP([Z_TE; Z_VE])) per element."""

    def __init__(self, n_features: int, d_fusion: int = 256):
        super().__init__()
        self.gate = nn.Sequential(nn.Linear(2 * n_features, d_fusion), nn.GELU(), nn.Linear(d_fusion, n_features))
        init_weights(self)

    def forward(self, z_te: torch.Tensor, z_ve: torch.Tensor, gate_override: Optional[float] = None,
                return_gate: bool = False):
        if z_te.shape != z_ve.shape:
            raise DimensionError(f"Branch shapes differ: {tuple(z_te.shape)} vs {tuple(z_ve.shape)}")
        if gate_override is None:
            g = torch.sigmoid(self.gate(torch.cat([z_te, z_ve], dim=-1)))
        else:
            g = torch.full_like(z_te, float(gate_override))
        y = g * z_te + (1.0 - g) * z_ve
        return (y, g) if return_gate else y


def gated_fusion(fusion: GatedFusion, z_te: torch.Tensor, z_ve: torch.Tensor) -> torch.Tensor:
    return fusion(z_te, z_ve)
