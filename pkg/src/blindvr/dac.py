"""Corruption detector: cross-domain prompting neck, mask decoder, losses, metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import EncoderConfig, GlobalEncoder, ImageEncoder, TokenEncoder  # noqa: F401
from .sideinfo import SideInfo, encode_pred_mode, render_mv_map

TAU_MIN = 1e-3


@dataclass
class LossWeights:
    focal: float = 20.0
    dice: float = 1.0
    l1: float = 1.0
    ce: float = 1.0


@dataclass
class DACConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_prompts: int = 8
    use_mv_prompts: bool = True
    use_pm_prompt: bool = True
    neck_variant: str = "fused"  # or "grouped": one TDCA branch per prompt group
    heads: int = 4
    decoder_depth: int = 2
    tau_init: float = 0.1
    memory_momentum: float = 0.0
    iou_head: bool = True
    threshold: float = 0.5
    eta: float = 0.5
    v_max: float = 16.0
    loss: LossWeights = field(default_factory=LossWeights)


# ---------------------------------------------------------------------------
# token-dictionary cross attention
# ---------------------------------------------------------------------------


def cosine_similarity_matrix(q: torch.Tensor, k: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Pairwise cosine similarity; rows with zero norm give similarity 0."""
    qn = q / q.norm(dim=-1, keepdim=True).clamp_min(eps)
    kn = k / k.norm(dim=-1, keepdim=True).clamp_min(eps)
    return qn @ kn.transpose(-1, -2)


def tdca(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, tau) -> tuple[torch.Tensor, torch.Tensor]:
    """``softmax(cos(q, k) / tau) @ v``. Returns (output, attention)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    tau = torch.as_tensor(tau, dtype=q.dtype)
    if torch.any(tau <= 0):
        raise ValueError("tau must be positive")
    attn = torch.softmax(cosine_similarity_matrix(q, k) / tau, dim=-1)
    return attn @ v, attn


@dataclass
class PromptPool:
    tokens: torch.Tensor  # B x T x D
    groups: dict[str, tuple[int, int]]

    def __len__(self) -> int:
        return self.tokens.shape[1]

    def group(self, name: str) -> torch.Tensor:
        a, b = self.groups[name]
        return self.tokens[:, a:b]


def build_prompt_pool(
    mv_tokens: torch.Tensor | None, pm_tokens: torch.Tensor | None, learned: torch.Tensor
) -> PromptPool:
    """Concatenate (motion-vector, prediction-mode, learned) prompts in that order."""
    batch = next(t.shape[0] for t in (mv_tokens, pm_tokens) if t is not None) if (
        mv_tokens is not None or pm_tokens is not None
    ) else 1
    width = learned.shape[-1]
    parts, groups, start = [], {}, 0
    for name, t in (("mv", mv_tokens), ("pm", pm_tokens)):
        if t is None:
            continue
        if t.dim() == 2:
            t = t.unsqueeze(1)
        if t.shape[-1] != width:
            raise ValueError(f"{name} tokens have width {t.shape[-1]}, learned prompts {width}")
        parts.append(t)
        groups[name] = (start, start + t.shape[1])
        start += t.shape[1]
    parts.append(learned.unsqueeze(0).expand(batch, -1, -1))
    groups["learned"] = (start, start + learned.shape[0])
    return PromptPool(torch.cat(parts, dim=1), groups)


class PromptingNeck(nn.Module):
    """Prompt the finest visual level through TDCA and fuse by self-attention.

    The fused update of the finest level is average-pooled down to the coarser
    levels and added through bias-free 1x1 projections.
    """

    def __init__(self, channels: tuple[int, ...], dim: int, heads: int = 4, tau_init: float = 0.1,
                 variant: str = "fused", max_grid: int = 64):
        super().__init__()
        if variant not in ("fused", "grouped"):
            raise ValueError(f"unknown neck variant {variant!r}")
        c1 = channels[0]
        self.variant = variant
        self.q_proj = nn.Linear(c1, dim)
        # queries need positions to find their co-located motion-vector tokens
        self.row_embed = nn.Parameter(0.02 * torch.randn(max_grid, dim))
        self.col_embed = nn.Parameter(0.02 * torch.randn(max_grid, dim))
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.back = nn.Linear(dim, c1)
        self.tau = nn.Parameter(torch.tensor(float(tau_init)))
        self.norm = nn.LayerNorm(c1)
        self.attn = nn.MultiheadAttention(c1, heads, batch_first=True)
        self.out = nn.Linear(c1, c1)
        self.align = nn.ModuleList(nn.Conv2d(c1, c, 1, bias=False) for c in channels[1:])

    @torch.no_grad()
    def clamp_tau_(self) -> None:
        self.tau.clamp_(min=TAU_MIN)

    def enhance(self, tokens: torch.Tensor, pool: PromptPool, h: int, w: int) -> list[torch.Tensor]:
        pos = (self.row_embed[:h, None, :] + self.col_embed[None, :w, :]).reshape(h * w, -1)
        q = self.q_proj(tokens) + pos
        tau = self.tau.clamp_min(TAU_MIN)
        if self.variant == "fused":
            keys = [pool.tokens]
        else:
            keys = [pool.group(g) for g in pool.groups]
        out = []
        for kv in keys:
            e, _ = tdca(q, self.k_proj(kv), self.v_proj(kv), tau)
            out.append(self.back(e))
        return out

    def forward(self, feats: list[torch.Tensor], pool: PromptPool) -> list[torch.Tensor]:
        f1 = feats[0]
        b, c, h, w = f1.shape
        tokens = f1.flatten(2).transpose(1, 2)
        seq = self.norm(torch.cat([tokens, *self.enhance(tokens, pool, h, w)], dim=1))
        y, _ = self.attn(seq, seq, seq, need_weights=False)
        delta = self.out(y[:, : h * w]).transpose(1, 2).reshape(b, c, h, w)
        refined = [f1 + delta]
        for j, (fj, proj) in enumerate(zip(feats[1:], self.align), start=1):
            refined.append(fj + proj(F.avg_pool2d(delta, 2**j)))
        return refined


# ---------------------------------------------------------------------------
# mask decoder
# ---------------------------------------------------------------------------


class _MLP(nn.Sequential):
    def __init__(self, cin, hidden, cout):
        super().__init__(nn.Linear(cin, hidden), nn.GELU(), nn.Linear(hidden, cout))


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.t2i = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.i2t = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.mlp = _MLP(dim, 2 * dim, dim)
        self.norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(4))

    def forward(self, tokens, image, pos):
        t = tokens + self.self_attn(tokens, tokens, tokens, need_weights=False)[0]
        t = self.norms[0](t)
        t = self.norms[1](t + self.t2i(t, image + pos, image, need_weights=False)[0])
        t = self.norms[2](t + self.mlp(t))
        image = self.norms[3](image + self.i2t(image + pos, t, t, need_weights=False)[0])
        return t, image


class MaskDecoder(nn.Module):
    """Two-way token/feature attention with a hypernetwork upsampling head.

    Logits come out at 4x the finest feature resolution (the input frame size).
    """

    def __init__(self, channels: tuple[int, ...], heads: int = 4, depth: int = 2, iou_head: bool = True):
        super().__init__()
        c1 = channels[0]
        self.lateral = nn.ModuleList(nn.Conv2d(c, c1, 1) for c in channels[1:])
        self.tokens = nn.Parameter(0.02 * torch.randn(2, c1))  # iou, mask
        self.pos = nn.Linear(4, c1)
        self.blocks = nn.ModuleList(TwoWayBlock(c1, heads) for _ in range(depth))
        c2, c4 = max(c1 // 2, 1), max(c1 // 4, 1)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(c1, c2, 2, stride=2), nn.GELU(), nn.ConvTranspose2d(c2, c4, 2, stride=2), nn.GELU()
        )
        self.hyper = _MLP(c1, c1, c4)
        self.iou = _MLP(c1, c1, 1) if iou_head else None

    @staticmethod
    def _coords(h, w, like):
        ys = torch.linspace(-1.0, 1.0, h, dtype=like.dtype)
        xs = torch.linspace(-1.0, 1.0, w, dtype=like.dtype)
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        c = torch.stack([gy, gx, torch.sin(math.pi * gy), torch.sin(math.pi * gx)], dim=-1)
        return c.reshape(h * w, 4)

    def forward(self, feats: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor | None]:
        f1 = feats[0]
        b, c, h, w = f1.shape
        img = f1
        for fj, lat in zip(feats[1:], self.lateral):
            img = img + F.interpolate(lat(fj), size=(h, w), mode="bilinear", align_corners=False)
        image = img.flatten(2).transpose(1, 2)
        pos = self.pos(self._coords(h, w, f1)).unsqueeze(0)
        tokens = self.tokens.unsqueeze(0).expand(b, -1, -1)
        for blk in self.blocks:
            tokens, image = blk(tokens, image, pos)
        up = self.up(image.transpose(1, 2).reshape(b, c, h, w))
        weights = self.hyper(tokens[:, 1])
        logits = torch.einsum("bc,bchw->bhw", weights, up)
        iou = torch.sigmoid(self.iou(tokens[:, 0]).squeeze(-1)) if self.iou is not None else None
        return logits, iou


# ---------------------------------------------------------------------------
# full detector
# ---------------------------------------------------------------------------


@dataclass
class DetectorOutput:
    logits: torch.Tensor  # B x H x W
    iou_pred: torch.Tensor | None
    features: list[torch.Tensor]  # refined pyramid


class CorruptionDetector(nn.Module):
    def __init__(self, cfg: DACConfig, image_encoder=None, token_encoder=None):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder
        self.image_encoder = image_encoder if image_encoder is not None else ImageEncoder(enc)
        self.token_encoder = token_encoder if token_encoder is not None else TokenEncoder(enc)
        channels = tuple(self.image_encoder.channels)
        dim = self.token_encoder.dim
        self.pm_tokenizer = nn.Linear(3, dim)
        self.prompts = nn.Parameter(0.02 * torch.randn(cfg.num_prompts, dim))
        self.neck = PromptingNeck(channels, dim, cfg.heads, cfg.tau_init, cfg.neck_variant, enc.max_grid)
        self.decoder = MaskDecoder(channels, cfg.heads, cfg.decoder_depth, cfg.iou_head)

    def prompt_pool(self, mv_maps: torch.Tensor | None, pm: torch.Tensor | None) -> PromptPool:
        mv_tokens = self.token_encoder(mv_maps) if (self.cfg.use_mv_prompts and mv_maps is not None) else None
        pm_tokens = self.pm_tokenizer(pm) if (self.cfg.use_pm_prompt and pm is not None) else None
        pool = build_prompt_pool(mv_tokens, pm_tokens, self.prompts)
        return pool

    def _memory(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        m = self.cfg.memory_momentum
        if m <= 0:
            return feats
        f1 = feats[0]
        out = [f1[0]]
        for t in range(1, f1.shape[0]):
            out.append((1 - m) * f1[t] + m * out[-1])
        return [torch.stack(out)] + feats[1:]

    def forward(self, frames: torch.Tensor, mv_maps: torch.Tensor | None = None,
                pm: torch.Tensor | None = None) -> DetectorOutput:
        feats = self._memory(self.image_encoder(frames))
        pool = self.prompt_pool(mv_maps, pm)
        if pool.tokens.shape[0] == 1 and frames.shape[0] > 1:
            pool = PromptPool(pool.tokens.expand(frames.shape[0], -1, -1), pool.groups)
        refined = self.neck(feats, pool)
        logits, iou = self.decoder(refined)
        return DetectorOutput(logits, iou, refined)

    def clamp_(self) -> None:
        self.neck.clamp_tau_()


def side_inputs(frames: np.ndarray, infos: list[SideInfo], eta: float = 0.5,
                v_max: float = 16.0) -> tuple[np.ndarray, np.ndarray]:
    """Motion-vector maps (N x H x W x 3) and prediction-mode one-hots (N x 3)."""
    maps = np.stack([render_mv_map(si, f, eta, v_max) for si, f in zip(infos, frames)])
    pm = np.stack([encode_pred_mode(si.pred_mode) for si in infos])
    return maps, pm


def to_nchw(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames)).to(dtype).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------


def focal_loss(logits, target, alpha: float = 0.25, gamma: float = 2.0):
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p_t = p * target + (1 - p) * (1 - target)
    a_t = alpha * target + (1 - alpha) * (1 - target)
    return (a_t * ce * (1 - p_t) ** gamma).mean()


def dice_loss(logits, target, eps: float = 1e-6):
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1)
    inter = (p * t).sum(-1)
    return (1 - (2 * inter + eps) / (p.sum(-1) + t.sum(-1) + eps)).mean()


def hard_iou(logits, target, threshold: float = 0.5):
    pred = (torch.sigmoid(logits) > threshold).to(target.dtype).flatten(1)
    t = target.flatten(1)
    inter = (pred * t).sum(-1)
    union = ((pred + t) > 0).to(t.dtype).sum(-1)
    return torch.where(union > 0, inter / union.clamp_min(1), torch.ones_like(union))


def dac_loss(logits: torch.Tensor, gt: torch.Tensor, iou_pred: torch.Tensor | None = None,
             weights: LossWeights | None = None, threshold: float = 0.5,
             return_terms: bool = False):
    """Weighted focal + dice + IoU-L1 + cross-entropy loss over B x H x W logits."""
    weights = weights or LossWeights()
    if logits.shape != gt.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs gt {tuple(gt.shape)}")
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("gt mask must be binary")
    terms = {
        "focal": focal_loss(logits, gt),
        "dice": dice_loss(logits, gt),
        "ce": F.binary_cross_entropy_with_logits(logits, gt),
    }
    if iou_pred is not None:
        terms["l1"] = (iou_pred - hard_iou(logits.detach(), gt, threshold)).abs().mean()
    total = sum(getattr(weights, k) * v for k, v in terms.items())
    if return_terms:
        return total, {k: float(v.detach()) for k, v in terms.items()}
    return total


@dataclass
class DetectionReport:
    mean_iou: float
    mean_dice: float
    mean_acc: float
    mean_recall: float

    def as_dict(self) -> dict:
        return {"mean_iou": self.mean_iou, "mean_dice": self.mean_dice,
                "mean_acc": self.mean_acc, "mean_recall": self.mean_recall}


def detection_metrics(pred: np.ndarray, gt: np.ndarray) -> DetectionReport:
    """Per-frame IoU / Dice / accuracy / recall averaged over frames (L x H x W)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    for name, a in (("pred", pred), ("gt", gt)):
        if not np.all((a == 0) | (a == 1)):
            raise ValueError(f"{name} mask must be binary")
    p = pred.reshape(len(pred), -1).astype(bool)
    g = gt.reshape(len(gt), -1).astype(bool)
    inter = (p & g).sum(1).astype(np.float64)
    union = (p | g).sum(1).astype(np.float64)
    ps, gs = p.sum(1).astype(np.float64), g.sum(1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 1.0)
        dice = np.where(ps + gs > 0, 2 * inter / (ps + gs), 1.0)
        recall = np.where(gs > 0, inter / gs, 1.0)
    acc = (p == g).mean(1)
    return DetectionReport(float(iou.mean()), float(dice.mean()), float(acc.mean()), float(recall.mean()))
