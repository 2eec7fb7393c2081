"""Checkpoint files: a versioned header plus a flat map of named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Carries a machine-readable ``reason`` for the CLI."""

    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


@dataclass
class Checkpoint:
    stage: str
    step: int
    fingerprint: str
    params: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)
    optimizer: dict | None = None
    losses: list[float] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {
            "header": {
                "format": "blindvr-checkpoint",
                "version": FORMAT_VERSION,
                "stage": self.stage,
                "step": self.step,
                "fingerprint": self.fingerprint,
                "shapes": {k: list(v.shape) for k, v in self.params.items()},
            },
            "config": self.config,
            "params": {k: v.detach().clone() for k, v in self.params.items()},
            "optimizer": self.optimizer,
            "losses": list(self.losses),
            "extra": self.extra,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(blob, tmp)
        tmp.replace(path)


def load_checkpoint(path: str | Path, fingerprint: str | None = None, stage: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError("missing-checkpoint", str(path))
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        header = blob["header"]
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CheckpointError("bad-checkpoint", f"{path}: {exc}") from exc
    if header.get("format") != "blindvr-checkpoint" or header.get("version") != FORMAT_VERSION:
        raise CheckpointError("bad-checkpoint", f"{path}: unsupported header {header.get('format')} v{header.get('version')}")
    if stage is not None and header["stage"] != stage:
        raise CheckpointError("wrong-stage", f"{path} is a {header['stage']} checkpoint, expected {stage}")
    if fingerprint is not None and header["fingerprint"] != fingerprint:
        raise CheckpointError(
            "fingerprint-mismatch", f"{path}: {header['fingerprint']} != expected {fingerprint}"
        )
    return Checkpoint(
        stage=header["stage"],
        step=int(header["step"]),
        fingerprint=header["fingerprint"],
        params=blob["params"],
        config=blob.get("config") or {},
        optimizer=blob.get("optimizer"),
        losses=list(blob.get("losses") or []),
        extra=blob.get("extra") or {},
    )
