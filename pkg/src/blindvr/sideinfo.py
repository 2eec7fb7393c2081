"""Motion-vector maps and prediction-mode one-hots from decoder side information.

Sidecar format (JSON)::

    {"version": 1, "block": 16, "grid": [rows, cols],
     "frames": [{"mode": "P", "mv": [[dx, dy], ...]}, ...]}

``mv`` lists one vector per macroblock in row-major order. Intra frames may
omit ``mv``; they get a zero field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PRED_MODES = ("I", "P", "B")
SIDECAR_VERSION = 1


class SidecarError(ValueError):
    pass


@dataclass
class SideInfo:
    mv_field: np.ndarray
    pred_mode: str

    def __post_init__(self):
        mv = np.asarray(self.mv_field, dtype=np.float32)
        if mv.ndim != 3 or mv.shape[-1] != 2:
            raise ValueError(f"mv_field must be rows x cols x 2, got {mv.shape}")
        if not np.all(np.isfinite(mv)):
            raise ValueError("mv_field contains non-finite values")
        if self.pred_mode not in PRED_MODES:
            raise ValueError(f"unknown prediction mode {self.pred_mode!r}")
        self.mv_field = mv


def encode_pred_mode(mode: str) -> np.ndarray:
    """One-hot over (I, P, B)."""
    if mode not in PRED_MODES:
        raise ValueError(f"unknown prediction mode {mode!r}")
    vec = np.zeros(3, dtype=np.float32)
    vec[PRED_MODES.index(mode)] = 1.0
    return vec


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def mv_to_hsv(mv_field: np.ndarray, v_max: float = 16.0) -> np.ndarray:
    """Per-block HSV: hue from direction, value from magnitude (0 for still blocks)."""
    dx = mv_field[..., 0].astype(np.float64)
    dy = mv_field[..., 1].astype(np.float64)
    hue = np.mod(np.arctan2(dy, dx) / (2.0 * np.pi), 1.0)
    mag = np.hypot(dx, dy)
    if np.isinf(v_max):
        value = (mag > 0).astype(np.float64)
    else:
        value = np.minimum(1.0, mag / v_max)
    return np.stack([hue, np.ones_like(hue), value], axis=-1)


def render_mv_map(
    sideinfo: SideInfo, frame: np.ndarray, eta: float = 0.5, v_max: float = 16.0
) -> np.ndarray:
    """Colour each macroblock by its motion direction and blend with ``frame``.

    Returns ``eta * mv_rgb + (1 - eta) * frame`` as float32 H x W x 3.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    frame = np.asarray(frame)
    rows, cols = sideinfo.mv_field.shape[:2]
    h, w = frame.shape[:2]
    if h % rows or w % cols or h // rows != w // cols:
        raise ValueError(f"mv grid {rows}x{cols} does not tile frame {h}x{w}")
    block = h // rows
    rgb = hsv_to_rgb(mv_to_hsv(sideinfo.mv_field, v_max))
    rgb = np.repeat(np.repeat(rgb, block, axis=0), block, axis=1)
    if eta == 0.0:
        return frame.astype(np.float32).copy()
    out = eta * rgb + (1.0 - eta) * frame.astype(np.float64)
    return out.astype(np.float32)


def parse_sidecar(path: str | Path) -> list[SideInfo]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SidecarError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or "frames" not in doc or "grid" not in doc:
        raise SidecarError(f"{path}: expected an object with 'grid' and 'frames'")
    if doc.get("version", SIDECAR_VERSION) != SIDECAR_VERSION:
        raise SidecarError(f"{path}: unsupported sidecar version {doc.get('version')}")
    try:
        rows, cols = (int(x) for x in doc["grid"])
    except (TypeError, ValueError) as exc:
        raise SidecarError(f"{path}: field 'grid' must be [rows, cols]") from exc
    out = []
    for i, entry in enumerate(doc["frames"]):
        if not isinstance(entry, dict):
            raise SidecarError(f"{path}: frame {i}: entry must be an object")
        mode = entry.get("mode")
        if mode not in PRED_MODES:
            raise SidecarError(f"{path}: frame {i}: field 'mode' has invalid value {mode!r}")
        mv = entry.get("mv")
        if mode == "I" or mv is None:
            if mv is None and mode != "I":
                raise SidecarError(f"{path}: frame {i}: field 'mv' missing for {mode} frame")
            field = np.zeros((rows, cols, 2), dtype=np.float32)
        else:
            try:
                arr = np.asarray(mv, dtype=np.float32)
            except (TypeError, ValueError) as exc:
                raise SidecarError(f"{path}: frame {i}: field 'mv' is not numeric") from exc
            if arr.shape != (rows * cols, 2):
                raise SidecarError(
                    f"{path}: frame {i}: field 'mv' has shape {arr.shape}, expected {(rows * cols, 2)}"
                )
            if not np.all(np.isfinite(arr)):
                raise SidecarError(f"{path}: frame {i}: field 'mv' has non-finite values")
            field = arr.reshape(rows, cols, 2)
        out.append(SideInfo(field, mode))
    return out


def write_sidecar(path: str | Path, infos: list[SideInfo], block: int = 16) -> None:
    if not infos:
        raise ValueError("nothing to write")
    rows, cols = infos[0].mv_field.shape[:2]
    frames = []
    for info in infos:
        entry: dict = {"mode": info.pred_mode}
        if info.pred_mode != "I":
            entry["mv"] = info.mv_field.reshape(-1, 2).tolist()
        frames.append(entry)
    doc = {"version": SIDECAR_VERSION, "block": block, "grid": [rows, cols], "frames": frames}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))
