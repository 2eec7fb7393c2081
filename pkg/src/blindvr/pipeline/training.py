"""Two-stage training: detector first, then feature completion on top of the frozen detector."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..cfc import FeatureCompletion
from ..dac import CorruptionDetector, DetectionReport, dac_loss, detection_metrics, side_inputs, to_nchw
from ..videodata import sample_clip
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .config import RunConfig, from_dict, structure_fingerprint, substream, to_dict

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


@dataclass
class PreparedVideo:
    clip_id: str
    frames: torch.Tensor  # L x 3 x H x W
    clean: torch.Tensor
    mv_maps: torch.Tensor
    pm: torch.Tensor  # L x 3
    gt: torch.Tensor  # L x H x W


def prepare(dataset, eta: float, v_max: float) -> list[PreparedVideo]:
    out = []
    for i in range(len(dataset)):
        rec = dataset[i]
        maps, pm = side_inputs(rec.corrupted.frames, rec.sideinfo, eta, v_max)
        out.append(PreparedVideo(
            rec.clip_id,
            to_nchw(rec.corrupted.frames),
            to_nchw(rec.clean.frames),
            to_nchw(maps),
            torch.from_numpy(pm),
            torch.from_numpy(rec.gt_masks.masks.copy()),
        ))
    return out


@dataclass
class TrainResult:
    model: torch.nn.Module
    checkpoint: Checkpoint
    losses: list[float]
    reports: list[dict] = field(default_factory=list)


def build_detector(cfg: RunConfig) -> CorruptionDetector:
    torch.manual_seed(substream(cfg.seed or 0, "init-dac"))
    return CorruptionDetector(cfg.dac)


def build_completion(cfg: RunConfig) -> FeatureCompletion:
    torch.manual_seed(substream(cfg.seed or 0, "init-cfc"))
    return FeatureCompletion(cfg.cfc)


def _optimizer(name: str, groups, lr: float, weight_decay: float):
    if name == "adamw":
        return torch.optim.AdamW(groups, lr=lr, weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(groups, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def _warmup(step: int, warmup: int) -> float:
    return 1.0 if warmup <= 0 else min(1.0, (step + 1) / warmup)


def batch_clips(n_videos: int, batch: int, step: int, data_seed: int) -> list[int]:
    """Video indices for ``step``: seeded permutation per epoch, walked in order."""
    out = []
    for i in range(batch):
        k = step * batch + i
        epoch, pos = divmod(k, n_videos)
        perm = np.random.default_rng([data_seed, epoch]).permutation(n_videos)
        out.append(int(perm[pos]))
    return out


def _dump_and_raise(out: Path | None, stage: str, step: int, losses: list[float], terms: dict):
    if out is not None:
        dump = Path(out).with_suffix(".nan.json")
        dump.write_text(json.dumps({"stage": stage, "step": step, "terms": terms, "recent": losses[-20:]}))
    raise TrainingError("nan-loss", f"{stage} step {step}: non-finite loss, terms={terms}")


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


@torch.no_grad()
def detector_report(model: CorruptionDetector, videos: Sequence[PreparedVideo]) -> DetectionReport:
    model.eval()
    preds, gts = [], []
    for v in videos:
        out = model(v.frames, v.mv_maps, v.pm)
        preds.append((torch.sigmoid(out.logits) > model.cfg.threshold).float().numpy())
        gts.append(v.gt.numpy())
    model.train()
    return detection_metrics(np.concatenate(preds), np.concatenate(gts))


def train_dac(cfg: RunConfig, dataset, out: str | Path | None = None, resume: str | Path | None = None,
              steps: int | None = None, callback: Callable[[int, float], None] | None = None) -> TrainResult:
    if cfg.seed is None:
        raise TrainingError("missing-seed", "train_dac requires a seed")
    total = cfg.dac_optim.steps if steps is None else steps
    videos = prepare(dataset, cfg.dac.eta, cfg.dac.v_max)
    model = build_detector(cfg)
    fp = structure_fingerprint(cfg, model)
    opt = _optimizer(cfg.dac_optim.name, model.parameters(), cfg.dac_optim.lr, cfg.dac_optim.weight_decay)
    start, losses, reports = 0, [], []
    if resume is not None:
        ck = load_checkpoint(resume, fingerprint=fp, stage="dac")
        model.load_state_dict(ck.params)
        opt.load_state_dict(ck.optimizer)
        start, losses = ck.step, list(ck.losses)
        reports = list(ck.extra.get("reports", []))
    data_seed = substream(cfg.seed, "data-dac")
    n_local = cfg.n_local
    model.train()
    for step in range(start, total):
        for g in opt.param_groups:
            g["lr"] = cfg.dac_optim.lr * _warmup(step, cfg.dac_optim.warmup_steps)
        xs, mvs, pms, gts = [], [], [], []
        for i, vid in enumerate(batch_clips(len(videos), cfg.dac_optim.batch_clips, step, data_seed)):
            v = videos[vid]
            length = v.frames.shape[0]
            n = min(n_local, length)
            s = int(np.random.default_rng([data_seed, step, i]).integers(0, length - n + 1))
            xs.append(v.frames[s:s + n])
            mvs.append(v.mv_maps[s:s + n])
            pms.append(v.pm[s:s + n])
            gts.append(v.gt[s:s + n])
        pred = model(torch.cat(xs), torch.cat(mvs), torch.cat(pms))
        loss, terms = dac_loss(pred.logits, torch.cat(gts), pred.iou_pred, cfg.dac.loss,
                               cfg.dac.threshold, return_terms=True)
        if not torch.isfinite(loss):
            _dump_and_raise(Path(out) if out else None, "dac", step, losses, terms)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        model.clamp_()
        losses.append(float(loss.detach()))
        if callback:
            callback(step, losses[-1])
        if cfg.log_every and (step % cfg.log_every == 0 or step == total - 1):
            log.info("dac step %d loss %.5f", step, losses[-1])
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            reports.append({"step": step + 1, **detector_report(model, videos).as_dict()})
    ck = Checkpoint("dac", total, fp, dict(model.state_dict()), to_dict(cfg), opt.state_dict(), losses,
                    {"reports": reports})
    if out is not None:
        ck.save(out)
    return TrainResult(model, ck, losses, reports)


def load_detector(path: str | Path) -> tuple[CorruptionDetector, RunConfig]:
    ck = load_checkpoint(path, stage="dac")
    cfg = from_dict(ck.config)
    model = CorruptionDetector(cfg.dac)
    if structure_fingerprint(cfg, model) != ck.fingerprint:
        raise CheckpointError("fingerprint-mismatch", f"{path}: stored config does not rebuild the stored model")
    model.load_state_dict(ck.params)
    model.eval()
    return model, cfg


def load_completion(path: str | Path) -> tuple[FeatureCompletion, RunConfig]:
    ck = load_checkpoint(path, stage="cfc")
    cfg = from_dict(ck.config)
    model = FeatureCompletion(cfg.cfc)
    if structure_fingerprint(cfg, model) != ck.fingerprint:
        raise CheckpointError("fingerprint-mismatch", f"{path}: stored config does not rebuild the stored model")
    model.load_state_dict(ck.params)
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


@dataclass
class DetectorCache:
    masks: torch.Tensor  # L x 1 x H x W, binary
    features: list[torch.Tensor]


@torch.no_grad()
def run_detector(model: CorruptionDetector, frames, mv_maps, pm) -> DetectorCache:
    out = model(frames, mv_maps, pm)
    masks = (torch.sigmoid(out.logits) > model.cfg.threshold).to(frames.dtype).unsqueeze(1)
    return DetectorCache(masks, [f.detach() for f in out.features])


def recovery_loss(pred: torch.Tensor, clean: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """L1 inside the corrupted region plus L1 over the whole frame."""
    diff = (pred - clean).abs()
    region = (diff * mask).sum() / (mask.sum() * pred.shape[1]).clamp_min(1.0)
    return region + diff.mean()


def train_cfc(cfg: RunConfig, dataset, dac: str | Path | CorruptionDetector, out: str | Path | None = None,
              resume: str | Path | None = None, steps: int | None = None,
              callback: Callable[[int, float], None] | None = None) -> TrainResult:
    if cfg.seed is None:
        raise TrainingError("missing-seed", "train_cfc requires a seed")
    detector = load_detector(dac)[0] if isinstance(dac, (str, Path)) else dac
    detector.eval()
    for p in detector.parameters():
        p.requires_grad_(False)
    total = cfg.cfc_optim.steps if steps is None else steps
    videos = prepare(dataset, detector.cfg.eta, detector.cfg.v_max)
    caches = [run_detector(detector, v.frames, v.mv_maps, v.pm) for v in videos]

    model = build_completion(cfg)
    fp = structure_fingerprint(cfg, model)
    groups = model.parameter_groups()
    opt = _optimizer(
        cfg.cfc_optim.name,
        [{"params": groups[k], "name": k} for k in ("head", "completion", "cfc")],
        cfg.cfc_optim.lr,
        cfg.cfc_optim.weight_decay,
    )
    start, losses = 0, []
    if resume is not None:
        ck = load_checkpoint(resume, fingerprint=fp, stage="cfc")
        model.load_state_dict(ck.params)
        opt.load_state_dict(ck.optimizer)
        start, losses = ck.step, list(ck.losses)
    data_seed = substream(cfg.seed, "data-cfc")
    sample_seed = substream(cfg.seed, "sampling-cfc")
    model.train()
    for step in range(start, total):
        warm = step < cfg.recovery_warmup_steps
        frozen_head = cfg.freeze_recovery_head and not warm
        scale = _warmup(step, cfg.cfc_optim.warmup_steps)
        for g in opt.param_groups:
            lr = cfg.cfc_optim.lr * scale
            if g["name"] == "completion" and not warm:
                lr *= cfg.finetune_lr_scale
            if g["name"] == "head" and frozen_head:
                lr = 0.0
            g["lr"] = lr
        loss = torch.zeros(())
        ids = batch_clips(len(videos), cfg.cfc_optim.batch_clips, step, data_seed)
        for i, vid in enumerate(ids):
            seed = int(np.random.default_rng([sample_seed, step, i]).integers(0, 2**31))
            clip = sample_clip(dataset, vid, cfg.n_local, cfg.n_nonlocal, seed=seed)
            idx = clip.local_indices + clip.nonlocal_indices
            v, c = videos[vid], caches[vid]
            gt = v.gt[idx].unsqueeze(1)
            mask = c.masks[idx] if cfg.train_mask_source == "dac" else gt
            res = model(v.frames[idx], mask, [f[idx] for f in c.features], n_local=len(clip.local_indices))
            n = len(clip.local_indices)
            loss = loss + recovery_loss(res.prediction, v.clean[idx][:n], gt[:n])
        loss = loss / len(ids)
        if not torch.isfinite(loss):
            _dump_and_raise(Path(out) if out else None, "cfc", step, losses, {"total": float(loss)})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if frozen_head:
            for p in groups["head"]:
                p.grad = None
        opt.step()
        losses.append(float(loss.detach()))
        if callback:
            callback(step, losses[-1])
        if cfg.log_every and (step % cfg.log_every == 0 or step == total - 1):
            log.info("cfc step %d loss %.5f", step, losses[-1])
    ck = Checkpoint("cfc", total, fp, dict(model.state_dict()), to_dict(cfg), opt.state_dict(), losses)
    if out is not None:
        ck.save(out)
    return TrainResult(model, ck, losses)
