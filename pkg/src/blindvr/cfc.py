"""Corruption-aware feature completion.

Mask-gated scale-wise cross-attention inside a U-shaped augmentation block,
a mixture of residual experts coordinated by a global corruption embedding,
channel re-weighting, and a small recovery head that composites its output
into the corrupted regions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import EncoderConfig, GlobalEncoder


@dataclass
class CFCConfig:
    channels: tuple[int, ...] = (32, 64, 128)
    foundation_channels: tuple[int, ...] = (32, 64, 128)
    qk_rank: float = 0.5
    num_experts: int = 2
    num_prompts: int = 8
    prompt_dim: int = 64
    adapt_dim: int = 64
    gate: str = "vfm"  # "vfm" | "linear"
    use_more: bool = True
    use_augmentation: bool = True
    use_enhance: bool = True
    heads: int = 4
    global_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(global_dim=128))


def split_by_mask(x, m):
    """(intact, corrupted) with ``intact + corrupted == x``.

    ``m`` broadcasts against ``x``; ``intact`` is computed as ``x - corrupted``
    so the partition is exact in floating point for any mask.
    """
    if isinstance(x, np.ndarray):
        x, m = np.asarray(x), np.asarray(m)
        if m.ndim == x.ndim - 1:
            m = m[..., None]
        try:
            ok = np.broadcast_shapes(x.shape, m.shape) == x.shape
        except ValueError:
            ok = False
        if not ok:
            raise ValueError(f"mask {m.shape} does not match frame {x.shape}")
        corrupted = x * m
        return x - corrupted, corrupted
    try:
        ok = torch.broadcast_shapes(x.shape, m.shape) == x.shape
    except RuntimeError:
        ok = False
    if not ok:
        raise ValueError(f"mask {tuple(m.shape)} does not match frame {tuple(x.shape)}")
    corrupted = x * m
    return x - corrupted, corrupted


def _tokens(x):
    return x.flatten(2).transpose(1, 2)


def _untokens(t, h, w):
    return t.transpose(1, 2).reshape(t.shape[0], -1, h, w)


class ScaleCrossAttention(nn.Module):
    """Corruption features attend to foundation features; the result is gated by ``delta * M'``."""

    def __init__(self, channels: int, foundation_channels: int, rank: float = 0.5):
        super().__init__()
        self.d = max(1, int(round(channels * rank)))
        self.q = nn.Linear(channels, self.d)
        self.k = nn.Linear(foundation_channels, self.d)
        self.v = nn.Linear(foundation_channels, channels)

    def attend(self, fc, ff):
        q = self.q(_tokens(fc))
        k = self.k(_tokens(ff))
        v = self.v(_tokens(ff))
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.d), dim=-1)
        return _untokens(attn @ v, *fc.shape[-2:])

    def forward(self, fc, ff, mask, delta):
        if fc.shape[-2:] != ff.shape[-2:]:
            raise ValueError(f"scale mismatch {tuple(fc.shape[-2:])} vs {tuple(ff.shape[-2:])}")
        return scale_gate(self.attend(fc, ff), mask, delta)


def resize_mask(mask: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of an N x 1 x H x W mask, no re-thresholding."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask, size=size, mode="bilinear", align_corners=False)


def scale_gate(attended, mask, delta):
    return attended * (delta * resize_mask(mask, attended.shape[-2:]))


def blend_residual(f_aug, f_c, lam):
    if f_aug.shape != f_c.shape:
        raise ValueError(f"shape mismatch {tuple(f_aug.shape)} vs {tuple(f_c.shape)}")
    return lam * f_aug + (1 - lam) * f_c


class HierarchicalAugmentation(nn.Module):
    """U-shaped encoder/decoder over corrupted content with per-scale SCA + blend."""

    def __init__(self, cfg: CFCConfig):
        super().__init__()
        ch = tuple(cfg.channels)
        c0 = ch[0]
        self.enabled = cfg.use_augmentation
        self.stem = nn.Sequential(nn.Conv2d(4, c0, 3, 2, 1), nn.GELU(), nn.Conv2d(c0, c0, 3, 2, 1), nn.GELU())
        self.down = nn.ModuleList([nn.Sequential(nn.Conv2d(c0, c0, 3, 1, 1), nn.GELU())])
        for a, b in zip(ch[:-1], ch[1:]):
            self.down.append(nn.Sequential(nn.Conv2d(a, b, 3, 2, 1), nn.GELU()))
        self.sca = nn.ModuleList(
            ScaleCrossAttention(c, cf, cfg.qk_rank) for c, cf in zip(ch, cfg.foundation_channels)
        )
        self.lambda_raw = nn.Parameter(torch.zeros(len(ch)))
        # softplus(0.5413) == 1
        self.delta_raw = nn.Parameter(torch.full((len(ch),), 0.5413248546129181))
        self.up = nn.ModuleList(
            nn.Conv2d(b + a, a, 3, 1, 1) for a, b in zip(ch[:-1], ch[1:])
        )

    @property
    def lambdas(self):
        return torch.sigmoid(self.lambda_raw)

    @property
    def deltas(self):
        return F.softplus(self.delta_raw)

    def encode(self, corrupted, mask):
        x = self.stem(torch.cat([corrupted, mask], dim=1))
        pyramid = []
        for blk in self.down:
            x = blk(x)
            pyramid.append(x)
        return pyramid

    def augment(self, pyramid, foundation, mask):
        if len(pyramid) != len(foundation):
            raise ValueError("corruption and foundation ladders differ")
        if not self.enabled:
            return list(pyramid)
        lam, delta = self.lambdas, self.deltas
        out = []
        for j, (fc, ff) in enumerate(zip(pyramid, foundation)):
            f_aug = self.sca[j](fc, ff, mask, delta[j])
            out.append(blend_residual(f_aug, fc, lam[j]))
        return out

    def decode(self, pyramid):
        x = pyramid[-1]
        for j in range(len(pyramid) - 2, -1, -1):
            skip = pyramid[j]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = F.gelu(self.up[j](torch.cat([x, skip], dim=1)))
        return x

    def forward(self, corrupted, mask, foundation):
        aug = self.augment(self.encode(corrupted, mask), foundation, mask)
        return aug, self.decode(aug)


class CompletionBlock(nn.Module):
    """Preliminary completion: fuse intact and corruption features, then
    spatio-temporal self-attention over all frames of the clip at half the
    feature resolution."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.intact = nn.Sequential(nn.Conv2d(4, channels, 3, 2, 1), nn.GELU(),
                                    nn.Conv2d(channels, channels, 3, 2, 1), nn.GELU())
        self.fuse = nn.Conv2d(2 * channels, channels, 1)
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.refine = nn.Sequential(nn.Conv2d(channels, channels, 3, 1, 1), nn.GELU(),
                                    nn.Conv2d(channels, channels, 3, 1, 1))

    def forward(self, intact, mask, corruption_feat):
        f = self.fuse(torch.cat([self.intact(torch.cat([intact, 1 - mask], 1)), corruption_feat], 1))
        n, c, h, w = f.shape
        small = F.avg_pool2d(f, 2) if h % 2 == 0 and w % 2 == 0 and h > 1 else f
        sh, sw = small.shape[-2:]
        seq = self.norm(small.permute(0, 2, 3, 1).reshape(1, n * sh * sw, c))
        y, _ = self.attn(seq, seq, seq, need_weights=False)
        y = y.reshape(n, sh, sw, c).permute(0, 3, 1, 2)
        f = f + F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False)
        return f + self.refine(f)


class GlobalAdapter(nn.Module):
    """Two-layer projection of the global embedding to the voter width."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cin, cout), nn.GELU(), nn.Linear(cout, cout))

    def forward(self, g):
        return self.net(g)


class Voter(nn.Module):
    def __init__(self, cin: int, num_experts: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cin, cin), nn.GELU(), nn.Linear(cin, num_experts))

    def forward(self, x):
        return gate_weights(self.net(x))


def gate_weights(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


class ResidualExpert(nn.Module):
    """``x + u + FFN(u)`` with ``u`` the cross-attention of ``x`` onto prompts."""

    def __init__(self, channels: int, prompt_dim: int):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(prompt_dim, channels)
        self.v = nn.Linear(prompt_dim, channels)
        self.out = nn.Linear(channels, channels, bias=False)
        self.ffn = nn.Sequential(nn.Linear(channels, 2 * channels, bias=False), nn.GELU(),
                                 nn.Linear(2 * channels, channels, bias=False))

    def forward(self, fb, prompts):
        if prompts.shape[-1] != self.k.in_features:
            raise ValueError(f"prompt width {prompts.shape[-1]} != {self.k.in_features}")
        n, c, h, w = fb.shape
        x = _tokens(fb)
        q = self.q(x)
        k, v = self.k(prompts), self.v(prompts)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c), dim=-1)
        u = self.out(attn @ v)
        return _untokens(x + u + self.ffn(u), h, w)


def more_combine(outputs: list[torch.Tensor], w: torch.Tensor) -> torch.Tensor:
    """Weighted sum of expert outputs; ``w`` is 1 x N_e (or N_e), broadcast spatially."""
    w = w.reshape(-1)
    if w.numel() != len(outputs):
        raise ValueError(f"{w.numel()} gate weights for {len(outputs)} experts")
    out = w[0] * outputs[0]
    for wi, oi in zip(w[1:], outputs[1:]):
        out = out + wi * oi
    return out


class MixtureOfResidualExperts(nn.Module):
    def __init__(self, channels: int, prompt_dim: int, num_experts: int):
        super().__init__()
        self.experts = nn.ModuleList(ResidualExpert(channels, prompt_dim) for _ in range(num_experts))

    def forward(self, fb, prompts, w):
        if w.reshape(-1).numel() != len(self.experts):
            raise ValueError(f"{w.numel()} gate weights for {len(self.experts)} experts")
        return more_combine([e(fb, prompts) for e in self.experts], w)


class ResidualEnhance(nn.Module):
    """Channel re-weighting driven by the adapted global embedding.

    Each channel of the refined map becomes one key/value token (from its
    global average); the query comes from channel-pooling the global
    embedding. The attended vector passes a two-layer projection and a
    sigmoid to give one weight per channel.
    """

    def __init__(self, channels: int, adapt_dim: int, dim: int = 16):
        super().__init__()
        self.dim = dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(1, dim)
        self.v = nn.Linear(1, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, channels), nn.GELU(), nn.Linear(channels, channels))

    def weights(self, refined, g):
        n, c = refined.shape[:2]
        pooled = refined.mean(dim=(2, 3)).unsqueeze(-1)  # N x C x 1
        qc = F.adaptive_avg_pool1d(g.reshape(1, 1, -1), self.dim).reshape(1, 1, self.dim)
        q = self.q(qc).expand(n, -1, -1)
        k, v = self.k(pooled), self.v(pooled)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.dim), dim=-1)
        return torch.sigmoid(self.mlp((attn @ v).squeeze(1)))

    def forward(self, refined, g):
        return refined * self.weights(refined, g)[:, :, None, None]


class RecoveryHead(nn.Module):
    """Upsample completed features x4 and predict RGB with a full-resolution skip."""

    def __init__(self, channels: int):
        super().__init__()
        c2 = max(channels // 2, 4)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(channels, c2, 2, stride=2), nn.GELU(),
            nn.ConvTranspose2d(c2, c2, 2, stride=2), nn.GELU(),
        )
        self.skip = nn.Conv2d(4, c2, 3, 1, 1)
        self.out = nn.Sequential(nn.Conv2d(2 * c2, c2, 3, 1, 1), nn.GELU(), nn.Conv2d(c2, 3, 3, 1, 1))

    def forward(self, feat, intact, mask):
        x = torch.cat([self.up(feat), F.gelu(self.skip(torch.cat([intact, mask], 1)))], 1)
        return torch.sigmoid(self.out(x))


def composite(frames, pred, mask):
    """Keep input pixels where ``mask == 0``; take ``pred`` elsewhere; clamp to [0, 1]."""
    keep = (mask <= 0).expand_as(frames)
    return torch.where(keep, frames, pred.clamp(0.0, 1.0))


@dataclass
class CFCOutput:
    prediction: torch.Tensor  # raw head output, N_l x 3 x H x W
    recovered: torch.Tensor  # composited
    gate: torch.Tensor | None
    base: torch.Tensor
    refined: torch.Tensor


class FeatureCompletion(nn.Module):
    def __init__(self, cfg: CFCConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels[0]
        self.augmentation = HierarchicalAugmentation(cfg)
        self.completion = CompletionBlock(c, cfg.heads)
        self.prompts = nn.Parameter(0.02 * torch.randn(cfg.num_prompts, cfg.prompt_dim))
        self.global_encoder = GlobalEncoder(cfg.global_encoder)
        self.adapter = GlobalAdapter(self.global_encoder.dim, cfg.adapt_dim)
        gate_in = cfg.adapt_dim if cfg.gate == "vfm" else c
        self.voter = Voter(gate_in, cfg.num_experts)
        self.more = MixtureOfResidualExperts(c, cfg.prompt_dim, cfg.num_experts)
        self.enhance = ResidualEnhance(c, cfg.adapt_dim)
        self.head = RecoveryHead(c)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"head": list(self.head.parameters()), "completion": list(self.completion.parameters())}
        taken = {id(p) for ps in groups.values() for p in ps}
        groups["cfc"] = [p for p in self.parameters() if id(p) not in taken]
        return groups

    def global_embedding(self, frames, mask, n_local):
        mid = n_local // 2
        _, corrupted = split_by_mask(frames[mid:mid + 1], mask[mid:mid + 1])
        return self.adapter(self.global_encoder(corrupted))

    def forward(self, frames, mask, foundation, n_local: int | None = None) -> CFCOutput:
        """``frames`` N x 3 x H x W (local frames first), ``mask`` N x 1 x H x W,
        ``foundation`` the detector's refined pyramid for the same N frames."""
        n_local = frames.shape[0] if n_local is None else n_local
        intact, corrupted = split_by_mask(frames, mask)
        _, fused = self.augmentation(corrupted, mask, foundation)
        base = self.completion(intact, mask, fused)[:n_local]
        g = self.global_embedding(frames, mask, n_local)
        w = None
        if self.cfg.use_more:
            if self.cfg.gate == "vfm":
                w = self.voter(g)
            else:
                w = self.voter(base.mean(dim=(0, 2, 3)).unsqueeze(0))
            refined = self.more(base, self.prompts, w)
        else:
            refined = base
        if self.cfg.use_enhance:
            refined = self.enhance(refined, g)
        pred = self.head(refined, intact[:n_local], mask[:n_local])
        return CFCOutput(pred, composite(frames[:n_local], pred, mask[:n_local]), w, base, refined)
