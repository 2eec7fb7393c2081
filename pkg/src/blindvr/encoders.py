"""Small trainable stand-ins for the foundation-model encoders.

Every encoder works on NCHW tensors. Anything honouring the same shape
contracts (see the ``*Like`` protocols) can be plugged into the detector and
the feature-completion stack, e.g. adapters around pretrained backbones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    channels: tuple[int, ...] = (32, 64, 128)
    token_dim: int = 128
    patch: int = 16
    pos_embed: bool = True
    max_grid: int = 64
    global_dim: int = 128
    global_size: int = 32

    @property
    def num_scales(self) -> int:
        return len(self.channels)

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_scales + 1)


class ImageEncoderLike(Protocol):
    channels: tuple[int, ...]

    def __call__(self, frames: torch.Tensor) -> list[torch.Tensor]: ...


class TokenEncoderLike(Protocol):
    dim: int

    def __call__(self, mv_maps: torch.Tensor) -> torch.Tensor: ...


class GlobalEncoderLike(Protocol):
    dim: int

    def __call__(self, images: torch.Tensor) -> torch.Tensor: ...


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ImageEncoder(nn.Module):
    """Strided convolutional pyramid, stride 4 at the finest level.

    Returns ``S`` maps; level ``j`` has ``channels[j]`` channels at
    ``H / 2**(j + 2)``.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.channels = tuple(cfg.channels)
        c0 = self.channels[0]
        self.stem = nn.Sequential(_conv(3, c0, 2), nn.GELU(), _conv(c0, c0, 2), nn.GELU())
        self.levels = nn.ModuleList([nn.Sequential(_conv(c0, c0), nn.GELU())])
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            self.levels.append(nn.Sequential(_conv(cin, cout, 2), nn.GELU(), _conv(cout, cout)))

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        h, w = frames.shape[-2:]
        div = 2 ** (len(self.channels) + 1)
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} must be divisible by {div}")
        x = self.stem(frames)
        out = []
        for level in self.levels:
            x = level(x)
            out.append(x)
        return out


class TokenEncoder(nn.Module):
    """Patchify + linear projection + two-layer adaptation block."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.dim = cfg.token_dim
        self.patch = cfg.patch
        self.use_pos = cfg.pos_embed
        self.proj = nn.Conv2d(3, cfg.token_dim, cfg.patch, stride=cfg.patch)
        self.row_embed = nn.Parameter(0.02 * torch.randn(cfg.max_grid, cfg.token_dim))
        self.col_embed = nn.Parameter(0.02 * torch.randn(cfg.max_grid, cfg.token_dim))
        self.adapt = nn.Sequential(
            nn.Linear(cfg.token_dim, cfg.token_dim), nn.GELU(), nn.Linear(cfg.token_dim, cfg.token_dim)
        )

    def forward(self, mv_maps: torch.Tensor) -> torch.Tensor:
        h, w = mv_maps.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ValueError(f"map {h}x{w} not divisible by patch {self.patch}")
        x = self.proj(mv_maps)
        gh, gw = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)
        if self.use_pos:
            pos = self.row_embed[:gh, None, :] + self.col_embed[None, :gw, :]
            x = x + pos.reshape(gh * gw, -1)
        return x + self.adapt(x)


class GlobalEncoder(nn.Module):
    """Conv stack + global average pooling to one ``global_dim`` vector."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.dim = cfg.global_dim
        self.size = cfg.global_size
        c = cfg.channels[0]
        self.body = nn.Sequential(
            _conv(3, c, 2), nn.GELU(), _conv(c, c, 2), nn.GELU(), _conv(c, c, 2), nn.GELU()
        )
        self.head = nn.Linear(c, cfg.global_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] != self.size or images.shape[-2] != self.size:
            images = F.interpolate(images, size=(self.size, self.size), mode="bilinear", align_corners=False)
        x = self.body(images).mean(dim=(2, 3))
        return self.head(x)
