"""Toy VAE and the skip-connected controlled decoder.

Two decoders share one architecture: the original decoder is frozen after
pretraining, the controlled decoder starts as an exact copy plus
zero-initialized skip projections that inject the initial latent into
intermediate activations. At init the two decode identically.

Latent scaling: after pretraining a scalar ``latent_scale`` is chosen so
encoder outputs have roughly unit standard deviation. All public latents
(diffusion states, watermark samples, random noise) live in that scaled
space; the decoders unscale internally.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

SKIP_MODES = ("without", "single", "multiple")


@dataclass
class SkipConfig:
    """Where and how strongly the latent is injected into the decoder."""

    mode: str = "multiple"
    strength: float = 0.1

    def __post_init__(self):
        if self.mode not in SKIP_MODES:
            raise ValueError(f"mode must be one of {SKIP_MODES}, got {self.mode!r}")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError(f"strength must be in (0, 1], got {self.strength}")


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class VaeEncoder(nn.Module):
    """Image (3, H, W) -> diagonal Gaussian over latents (c, H/4, W/4)."""

    def __init__(self, image_channels=3, latent_channels=4, channels=(16, 32, 64)):
        super().__init__()
        c0, c1, c2 = channels
        self.conv_in = nn.Conv2d(image_channels, c0, 3, padding=1)
        self.res0 = ResBlock(c0)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.res1 = ResBlock(c1)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res2 = ResBlock(c2)
        self.norm_out = nn.GroupNorm(_groups(c2), c2)
        self.head_mu = nn.Conv2d(c2, latent_channels, 1)
        self.head_logvar = nn.Conv2d(c2, latent_channels, 1)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def forward(self, img):
        h = self.res0(self.conv_in(img))
        h = self.res1(self.down1(h))
        h = self.res2(self.down2(h))
        h = F.silu(self.norm_out(h))
        return self.head_mu(h), self.head_logvar(h)


class VaeDecoder(nn.Module):
    """Latent (c, h, w) -> image (3, 4h, 4w) in [0, 1].

    ``forward`` accepts optional per-stage additive injections, keyed by
    stage index (0 = deepest resolution), so a controlled wrapper can add
    skip signals without duplicating the body.
    """

    STAGES = 3

    def __init__(self, latent_channels=4, image_channels=3, channels=(64, 32, 16)):
        super().__init__()
        self.latent_channels = latent_channels
        self.channels = tuple(channels)
        c0, c1, c2 = channels
        self.conv_in = nn.Conv2d(latent_channels, c0, 3, padding=1)
        self.res0 = ResBlock(c0)
        self.conv1 = nn.Conv2d(c0, c1, 3, padding=1)
        self.res1 = ResBlock(c1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.res2 = ResBlock(c2)
        self.norm_out = nn.GroupNorm(_groups(c2), c2)
        self.conv_out = nn.Conv2d(c2, image_channels, 3, padding=1)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def forward(self, z, injections=None):
        injections = injections or {}
        h = self.conv_in(z / self.latent_scale)
        if 0 in injections:
            h = h + injections[0]
        h = self.res0(h)
        h = self.conv1(F.interpolate(h, scale_factor=2, mode="nearest"))
        if 1 in injections:
            h = h + injections[1]
        h = self.res1(h)
        h = self.conv2(F.interpolate(h, scale_factor=2, mode="nearest"))
        if 2 in injections:
            h = h + injections[2]
        h = self.res2(h)
        return torch.sigmoid(self.conv_out(F.silu(self.norm_out(h))))


class ControlledDecoder(nn.Module):
    """Decoder body plus zero-initialized skip projections of the latent.

    The skip signal defaults to the decoded latent itself; generation
    overrides it with the watermarked initial latent. Projections exist for
    every stage regardless of mode, so the mode can be switched at call
    time; unused projections simply stay at zero.
    """

    def __init__(self, body: VaeDecoder, skip_cfg: SkipConfig):
        super().__init__()
        self.body = body
        self.skip_cfg = skip_cfg
        self.projections = nn.ModuleList()
        for c in body.channels:
            proj = nn.Conv2d(body.latent_channels, c, 1)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.projections.append(proj)

    def _active_stages(self, mode):
        if mode == "without":
            return ()
        if mode == "single":
            return (0,)
        return tuple(range(VaeDecoder.STAGES))

    def forward(self, z, skip_latent=None, skip_cfg: SkipConfig | None = None):
        cfg = skip_cfg or self.skip_cfg
        s = z if skip_latent is None else skip_latent
        if s.shape != z.shape:
            raise ValueError(f"skip latent shape {tuple(s.shape)} != latent shape {tuple(z.shape)}")
        injections = {}
        h, w = z.shape[-2], z.shape[-1]
        for i in self._active_stages(cfg.mode):
            size = (h * 2**i, w * 2**i)
            s_i = s if size == (h, w) else F.interpolate(s, size=size, mode="nearest")
            injections[i] = cfg.strength * self.projections[i](s_i)
        return self.body(z, injections)


@dataclass
class DecoderPair:
    """Frozen original decoder and its trainable controlled counterpart."""

    original: VaeDecoder
    controlled: ControlledDecoder

    @staticmethod
    def from_original(original: VaeDecoder, skip_cfg: SkipConfig) -> "DecoderPair":
        for p in original.parameters():
            p.requires_grad_(False)
        controlled = ControlledDecoder(copy.deepcopy(original), skip_cfg)
        for p in controlled.body.parameters():
            p.requires_grad_(True)
        return DecoderPair(original=original, controlled=controlled)


def _check_latent(z, latent_channels):
    if z.dim() not in (3, 4) or z.shape[-3] != latent_channels:
        raise ValueError(f"expected latent with {latent_channels} channels, got shape {tuple(z.shape)}")


def encode_image(img: torch.Tensor, encoder: VaeEncoder) -> torch.Tensor:
    """Deterministic pipeline encode: scaled posterior mean."""
    squeeze = img.dim() == 3
    x = img[None] if squeeze else img
    mu, _ = encoder(x)
    z = mu * encoder.latent_scale
    return z[0] if squeeze else z


def decode_original(z: torch.Tensor, decoder: VaeDecoder) -> torch.Tensor:
    """Decode through the frozen original decoder; output in [0, 1]."""
    _check_latent(z, decoder.latent_channels)
    squeeze = z.dim() == 3
    x = z[None] if squeeze else z
    img = decoder(x)
    return img[0] if squeeze else img


def decode_controlled(
    z: torch.Tensor,
    pair: DecoderPair,
    cfg: SkipConfig | None = None,
    skip_latent: torch.Tensor | None = None,
) -> torch.Tensor:
    """Decode through the controlled decoder with latent skip injection.

    By default the decoded latent is also the skip signal; pass
    ``skip_latent`` to inject a different one (generation injects the
    watermarked initial latent while decoding the denoised latent).
    """
    _check_latent(z, pair.controlled.body.latent_channels)
    squeeze = z.dim() == 3
    x = z[None] if squeeze else z
    s = None
    if skip_latent is not None:
        s = skip_latent[None] if skip_latent.dim() == 3 else skip_latent
    img = pair.controlled(x, skip_latent=s, skip_cfg=cfg)
    return img[0] if squeeze else img
