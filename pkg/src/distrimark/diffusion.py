"""Toy latent diffusion model: denoiser network, DDIM sampling and inversion.

Both directions share one first-order update. With eps = eps_theta(x, t_cur)
and x0_hat = (x - sqrt(1 - ab_cur) * eps) / sqrt(ab_cur):

    x_next = sqrt(ab_next) * x0_hat + sqrt(1 - ab_next) * eps

Sampling walks the step grid downward (t_next < t_cur), inversion walks it
upward. Inversion always runs unconditionally: the verifier does not know
the condition used at generation time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .schedule import NoiseSchedule, ScheduleError


@dataclass
class DenoiserConfig:
    class_count: int = 4
    channels: int = 64
    depth: int = 4
    emb_dim: int = 128
    latent_channels: int = 4
    guidance_scale: float = 2.0

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be nonnegative")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (batched) timesteps scaled to [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :] * 1000.0
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class FiLMResBlock(nn.Module):
    """3x3 residual block modulated by a per-channel scale/shift embedding."""

    def __init__(self, channels, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * channels)

    def forward(self, x, emb):
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h * (1.0 + scale) + shift
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class Denoiser(nn.Module):
    """Small residual conv net predicting the injected noise.

    Conditioning: sinusoidal timestep embedding plus a learned class
    embedding. Class index ``class_count`` is the learned null class used
    for unconditional prediction and classifier-free guidance.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.conv_in = nn.Conv2d(cfg.latent_channels, c, 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.emb_dim, cfg.emb_dim), nn.SiLU(), nn.Linear(cfg.emb_dim, cfg.emb_dim)
        )
        self.class_emb = nn.Embedding(cfg.class_count + 1, cfg.emb_dim)
        self.blocks = nn.ModuleList(FiLMResBlock(c, cfg.emb_dim) for _ in range(cfg.depth))
        self.norm_out = nn.GroupNorm(8, c)
        self.conv_out = nn.Conv2d(c, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def null_class(self) -> int:
        return self.cfg.class_count

    def forward(self, x, t, class_ids=None):
        """Predict noise for latents ``x`` at integer timesteps ``t``.

        ``class_ids`` of None selects the null (unconditional) class.
        """
        if class_ids is None:
            class_ids = torch.full((x.shape[0],), self.null_class, device=x.device, dtype=torch.long)
        t_frac = t.to(x.dtype) / 1000.0
        emb = self.time_mlp(timestep_embedding(t_frac, self.cfg.emb_dim).to(x.dtype))
        emb = emb + self.class_emb(class_ids).to(x.dtype)
        h = self.conv_in(x)
        for block in self.blocks:
            h = block(h, emb)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


def predict_x0(x_t: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Recover the clean-sample estimate from a noisy sample and its noise.

    Inverts x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps:

        x0_hat = (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)
    """
    if not 1 <= t <= schedule.T:
        raise ScheduleError(f"timestep {t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar_at(t)
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def forward_noise(x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising x_t = sqrt(ab_t) x_0 + sqrt(1-ab_t) eps."""
    ab = schedule.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _guided_eps(denoiser, x, t_batch, condition, guidance_scale):
    """Classifier-free guidance blend: eps_u + g * (eps_c - eps_u)."""
    eps_u = denoiser(x, t_batch, None)
    if condition is None or guidance_scale == 0.0:
        return eps_u
    if isinstance(condition, int):
        condition = torch.full((x.shape[0],), condition, device=x.device, dtype=torch.long)
    eps_c = denoiser(x, t_batch, condition)
    return eps_u + guidance_scale * (eps_c - eps_u)


def _ddim_walk(denoiser, x, schedule, taus, condition, guidance_scale):
    """Run the shared DDIM update along a timestep grid (any direction)."""
    for i in range(len(taus) - 1):
        t_cur, t_next = int(taus[i]), int(taus[i + 1])
        ab_cur = schedule.alpha_bar_at(t_cur)
        ab_next = schedule.alpha_bar_at(t_next)
        t_batch = torch.full((x.shape[0],), t_cur, device=x.device, dtype=torch.long)
        eps = _guided_eps(denoiser, x, t_batch, condition, guidance_scale)
        x0_hat = (x - math.sqrt(1.0 - ab_cur) * eps) / math.sqrt(ab_cur)
        x = math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps
    return x


@torch.no_grad()
def ddim_sample(
    z_T: torch.Tensor,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    steps: int,
    condition: int | torch.Tensor | None = None,
    guidance_scale: float = 0.0,
) -> torch.Tensor:
    """Deterministic DDIM sampling from t=T down to t=0.

    ``z_T`` is (b, c, h, w) or (c, h, w); the same shape is returned.
    ``guidance_scale`` of 0 is exactly unconditional regardless of
    ``condition``.
    """
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be nonnegative")
    squeeze = z_T.dim() == 3
    x = z_T[None] if squeeze else z_T
    taus = schedule.step_grid(steps)[::-1]
    x = _ddim_walk(denoiser, x, schedule, taus, condition, guidance_scale)
    return x[0] if squeeze else x


@torch.no_grad()
def ddim_invert(
    z_0: torch.Tensor,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    steps: int,
    guidance_scale: float = 0.0,
) -> torch.Tensor:
    """Approximate DDIM inversion from t=0 up to t=T.

    Always runs unconditionally: the ``guidance_scale`` argument is part of
    the call signature for symmetry with sampling but is ignored, as the
    verifier never knows the generation-time condition.
    """
    del guidance_scale
    squeeze = z_0.dim() == 3
    x = z_0[None] if squeeze else z_0
    taus = schedule.step_grid(steps)
    x = _ddim_walk(denoiser, x, schedule, taus, None, 0.0)
    return x[0] if squeeze else x
