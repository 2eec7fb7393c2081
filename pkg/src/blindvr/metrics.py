"""PSNR / SSIM and masked-region variants.

LPIPS and VFID need pretrained networks; they plug in through
``register_scorer`` and show up as extra report columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0

_SCORERS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {}


def register_scorer(name: str, fn: Callable[[np.ndarray, np.ndarray], float]) -> None:
    """Register an external sequence-level scorer (e.g. LPIPS, VFID)."""
    _SCORERS[name] = fn


def external_scores(a: np.ndarray, b: np.ndarray) -> dict[str, float]:
    return {name: float(fn(a, b)) for name, fn in sorted(_SCORERS.items())}


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def _ssim_channel(a, b, g, c1, c2):
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         K1: float = 0.01, K2: float = 0.03, peak: float = 1.0) -> float:
    """Mean SSIM over valid Gaussian windows, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than window {window}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(window, sigma)
    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    vals = [_ssim_channel(a[..., c], b[..., c], g, c1, c2) for c in range(a.shape[-1])]
    return float(np.mean(vals))


@dataclass
class QualityReport:
    psnr_db: float | None
    ssim: float | None
    per_frame: list[tuple[float | None, float | None]] = field(default_factory=list)
    empty: bool = False
    extra: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"psnr_db": self.psnr_db, "ssim": self.ssim, "empty": self.empty}
        d.update(self.extra)
        return d


def _bbox(mask):
    ys, xs = np.nonzero(mask)
    return ys.min(), ys.max() + 1, xs.min(), xs.max() + 1


def masked_region_metrics(a: np.ndarray, b: np.ndarray, mask: np.ndarray,
                          window: int = 11, peak: float = 1.0) -> QualityReport:
    """PSNR over ``mask == 1`` pixels; SSIM over the mask's bounding box."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask)
    if a.shape != b.shape or a.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch {a.shape}, {b.shape}, mask {mask.shape}")
    sel = mask > 0.5
    if not sel.any():
        return QualityReport(None, None, empty=True)
    value = psnr(a[sel], b[sel], peak)
    y0, y1, x0, x1 = _bbox(sel)
    s = None
    if y1 - y0 >= window and x1 - x0 >= window:
        s = ssim(a[y0:y1, x0:x1], b[y0:y1, x0:x1], window=window, peak=peak)
    return QualityReport(value, s, per_frame=[(value, s)])


def sequence_quality(a: np.ndarray, b: np.ndarray, masks: np.ndarray | None = None) -> QualityReport:
    """Per-frame metrics over L x H x W x 3 sequences, averaged over frames.

    With ``masks``, the masked PSNR is pooled over all masked pixels of the
    sequence; empty frames are skipped.
    """
    per_frame = []
    if masks is None:
        for fa, fb in zip(a, b):
            per_frame.append((psnr(fa, fb), ssim(fa, fb) if min(fa.shape[:2]) >= 11 else None))
        ps = [p for p, _ in per_frame]
        ss = [s for _, s in per_frame if s is not None]
        return QualityReport(float(np.mean(ps)), float(np.mean(ss)) if ss else None, per_frame,
                             extra=external_scores(a, b))
    for fa, fb, m in zip(a, b, masks):
        r = masked_region_metrics(fa, fb, m)
        per_frame.append((r.psnr_db, r.ssim))
    sel = np.asarray(masks) > 0.5
    if not sel.any():
        return QualityReport(None, None, per_frame, empty=True)
    ss = [s for _, s in per_frame if s is not None]
    return QualityReport(psnr(np.asarray(a)[sel], np.asarray(b)[sel]),
                         float(np.mean(ss)) if ss else None, per_frame)


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned-column text table."""
    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
