"""Video containers, synthetic bitstream-style corruption and dataset I/O.

Frames are float32 arrays laid out ``L x H x W x 3`` with values in [0, 1].
Masks are ``L x H x W`` with 1 marking corrupted pixels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .sideinfo import SideInfo, write_sidecar, parse_sidecar

MACROBLOCK = 16
CORRUPTION_KINDS = ("color_stripe", "block_shift", "freeze_propagate", "texture_noise")

_VSEQ_MAGIC = b"VSEQ"
_VSEQ_VERSION = 1


class VideoFormatError(ValueError):
    """Raised when a video or mask file cannot be parsed or written."""


@dataclass
class VideoSequence:
    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be L x H x W x 3, got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("a video needs at least one frame")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        self.frames = frames

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def check_macroblocks(self, block: int = MACROBLOCK) -> None:
        if self.height % block or self.width % block:
            raise ValueError(
                f"frame size {self.height}x{self.width} is not divisible by macroblock {block}"
            )

    def subset(self, indices: Sequence[int]) -> "VideoSequence":
        return VideoSequence(self.frames[list(indices)], self.fps)


@dataclass
class MaskSequence:
    masks: np.ndarray
    binary: bool = True

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=np.float32)
        if masks.ndim != 3:
            raise ValueError(f"masks must be L x H x W, got {masks.shape}")
        if self.binary and not np.all((masks == 0) | (masks == 1)):
            raise ValueError("binary masks may only contain 0 and 1")
        self.masks = masks

    def __len__(self) -> int:
        return self.masks.shape[0]

    def matches(self, video: VideoSequence) -> bool:
        return self.masks.shape == video.frames.shape[:3]

    def subset(self, indices: Sequence[int]) -> "MaskSequence":
        return MaskSequence(self.masks[list(indices)], self.binary)

    def area_fractions(self) -> np.ndarray:
        return self.masks.reshape(len(self), -1).mean(axis=1)


@dataclass
class CorruptionSpec:
    seed: int
    kinds: tuple[str, ...] = CORRUPTION_KINDS
    area_fraction: float = 0.25
    residual_retention: float = 0.2

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if not self.kinds:
            raise ValueError("select at least one corruption kind")
        unknown = set(self.kinds) - set(CORRUPTION_KINDS)
        if unknown:
            raise ValueError(f"unknown corruption kinds: {sorted(unknown)}")
        if not 0.0 < self.area_fraction < 1.0:
            raise ValueError(f"area_fraction must lie in (0, 1), got {self.area_fraction}")
        if not 0.0 <= self.residual_retention <= 1.0:
            raise ValueError("residual_retention must lie in [0, 1]")


@dataclass
class ClipSample:
    local_frames: VideoSequence
    nonlocal_frames: VideoSequence
    gt_masks: MaskSequence
    sideinfo: list[SideInfo]
    clean_frames: VideoSequence
    local_indices: list[int] = field(default_factory=list)
    nonlocal_indices: list[int] = field(default_factory=list)
    # reference-frame annotations; the detector sees these frames too
    nonlocal_gt_masks: MaskSequence | None = None
    nonlocal_sideinfo: list[SideInfo] | None = None

    def __post_init__(self):
        if len(self.sideinfo) != len(self.local_frames):
            raise ValueError("need one SideInfo per local frame")
        if len(self.gt_masks) != len(self.local_frames):
            raise ValueError("need one gt mask per local frame")

    @property
    def num_frames(self) -> int:
        return len(self.local_frames) + len(self.nonlocal_frames)


# ---------------------------------------------------------------------------
# corruption simulation
# ---------------------------------------------------------------------------


def _slice_mask(rng: np.random.Generator, h: int, w: int, fraction: float, block: int) -> np.ndarray:
    """One lost slice: a raster-order run of macroblocks plus a partial block."""
    rows, cols = h // block, w // block
    n_blocks = rows * cols
    target = int(round(fraction * h * w))
    full, rest = divmod(target, block * block)
    partial_rows = int(round(rest / block))
    if partial_rows == block:
        full, partial_rows = full + 1, 0
    full = min(full, n_blocks)
    span = full + (1 if partial_rows else 0)
    start = int(rng.integers(0, n_blocks - span + 1)) if span <= n_blocks else 0
    mask = np.zeros((h, w), dtype=np.float32)
    for k in range(start, start + full):
        r, c = divmod(k, cols)
        mask[r * block:(r + 1) * block, c * block:(c + 1) * block] = 1.0
    if partial_rows and start + full < n_blocks:
        r, c = divmod(start + full, cols)
        mask[r * block:r * block + partial_rows, c * block:(c + 1) * block] = 1.0
    return mask


def _artifact_block(kind, rng, clean, prev_corrupted, y0, x0, block):
    h, w = clean.shape[:2]
    if kind == "freeze_propagate" and prev_corrupted is None:
        kind = "block_shift"
    if kind == "color_stripe":
        out = np.empty((block, block, 3), dtype=np.float32)
        y = 0
        while y < block:
            height = int(rng.integers(1, 5))
            color = rng.random(3).astype(np.float32)
            color[int(rng.integers(0, 3))] = 1.0
            out[y:y + height] = color
            y += height
        return out
    if kind == "block_shift":
        dy = int(rng.integers(-3, 4)) * 8
        dx = int(rng.integers(-3, 4)) * 8
        sy = int(np.clip(y0 + dy, 0, h - block))
        sx = int(np.clip(x0 + dx, 0, w - block))
        patch = clean[sy:sy + block, sx:sx + block]
        roll = int(rng.integers(1, 3))
        return np.roll(patch, roll, axis=-1).astype(np.float32)
    if kind == "freeze_propagate":
        return prev_corrupted[y0:y0 + block, x0:x0 + block].astype(np.float32)
    return rng.random((block, block, 3)).astype(np.float32)


def simulate_corruption(
    clean: VideoSequence, spec: CorruptionSpec, block: int = MACROBLOCK
) -> tuple[VideoSequence, MaskSequence]:
    """Corrupt ``clean`` with macroblock-structured artifacts.

    Inside the returned mask, each pixel is
    ``retention * clean + (1 - retention) * artifact`` (clamped to [0, 1]);
    outside it the clean pixel is copied unchanged.
    """
    clean.check_macroblocks(block)
    rng = np.random.default_rng(spec.seed)
    n, h, w, _ = clean.frames.shape
    kinds = list(spec.kinds)
    r = np.float32(spec.residual_retention)
    corrupted = clean.frames.copy()
    masks = np.zeros((n, h, w), dtype=np.float32)
    prev = None
    for i in range(n):
        mask = _slice_mask(rng, h, w, spec.area_fraction, block)
        artifact = np.zeros((h, w, 3), dtype=np.float32)
        for by in range(0, h, block):
            for bx in range(0, w, block):
                if not mask[by:by + block, bx:bx + block].any():
                    continue
                kind = kinds[int(rng.integers(0, len(kinds)))]
                artifact[by:by + block, bx:bx + block] = _artifact_block(
                    kind, rng, clean.frames[i], prev, by, bx, block
                )
        inside = mask.astype(bool)
        mixed = np.clip(r * clean.frames[i] + (np.float32(1.0) - r) * artifact, 0.0, 1.0)
        corrupted[i][inside] = mixed[inside]
        masks[i] = mask
        prev = corrupted[i]
    return VideoSequence(corrupted, clean.fps), MaskSequence(masks)


# ---------------------------------------------------------------------------
# synthetic clean content
# ---------------------------------------------------------------------------


def _gop_mode(i: int, gop: int) -> str:
    if i % gop == 0:
        return "I"
    return "P" if i % 2 else "B"


def synthetic_clean_video(
    rng: np.random.Generator, length: int, height: int, width: int, block: int = MACROBLOCK
) -> tuple[VideoSequence, np.ndarray]:
    """Smooth textured background plus moving shapes.

    Returns the video and the per-macroblock content velocity of every frame
    relative to its predecessor, shaped ``L x H/B x W/B x 2`` as (dx, dy).
    """
    pad = 4 * length + 8
    ch, cw = height + 2 * pad, width + 2 * pad
    yy, xx = np.mgrid[0:ch, 0:cw].astype(np.float32)
    canvas = np.zeros((ch, cw, 3), dtype=np.float32)
    for c in range(3):
        base = rng.uniform(0.25, 0.75)
        layer = np.full((ch, cw), base, dtype=np.float32)
        for _ in range(3):
            fy, fx = rng.uniform(0.02, 0.15, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            layer += np.float32(rng.uniform(0.05, 0.12)) * np.sin(fy * yy + fx * xx + phase)
        canvas[..., c] = layer
    canvas = np.clip(canvas, 0.0, 1.0)

    bg_v = rng.integers(-2, 3, size=2)
    shapes = []
    for _ in range(2):
        size = rng.integers(height // 6, height // 3, size=2)
        pos = rng.uniform([0, 0], [height - size[0], width - size[1]])
        vel = rng.integers(-3, 4, size=2)
        color = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
        shapes.append((size, pos, vel, color, bool(rng.integers(0, 2))))

    frames = np.zeros((length, height, width, 3), dtype=np.float32)
    motion = np.zeros((length, height // block, width // block, 2), dtype=np.float32)
    gy, gx = np.mgrid[0:height, 0:width]
    for t in range(length):
        oy = pad - bg_v[1] * t
        ox = pad - bg_v[0] * t
        frame = canvas[oy:oy + height, ox:ox + width].copy()
        owner = np.full((height, width), -1)
        for s, (size, pos, vel, color, round_) in enumerate(shapes):
            py = (pos[0] + vel[1] * t) % height
            px = (pos[1] + vel[0] * t) % width
            if round_:
                inside = ((gy - py - size[0] / 2) / (size[0] / 2)) ** 2 + (
                    (gx - px - size[1] / 2) / (size[1] / 2)
                ) ** 2 <= 1.0
            else:
                inside = (gy >= py) & (gy < py + size[0]) & (gx >= px) & (gx < px + size[1])
            shade = 0.85 + 0.15 * np.sin(0.3 * (gx - px) + 0.2 * (gy - py))
            frame[inside] = (color[None, :] * shade[inside][:, None]).astype(np.float32)
            owner[inside] = s
        frames[t] = np.clip(frame, 0.0, 1.0)
        if t == 0:
            continue
        for by in range(height // block):
            for bx in range(width // block):
                cell = owner[by * block:(by + 1) * block, bx * block:(bx + 1) * block]
                counts = np.bincount(cell.ravel() + 1, minlength=len(shapes) + 1)
                who = int(np.argmax(counts)) - 1
                vel = bg_v if who < 0 else shapes[who][2]
                motion[t, by, bx] = vel
    frames = np.round(frames * 255.0) / 255.0
    return VideoSequence(frames.astype(np.float32)), motion


def simulate_sideinfo(
    motion: np.ndarray,
    masks: MaskSequence,
    rng: np.random.Generator,
    gop: int = 8,
    block: int = MACROBLOCK,
) -> list[SideInfo]:
    """Side information as a decoder would report it for a corrupted stream.

    Blocks mostly covered by corruption carry garbage motion vectors.
    """
    out = []
    for t in range(motion.shape[0]):
        mode = _gop_mode(t, gop)
        if mode == "I":
            out.append(SideInfo(np.zeros_like(motion[t]), "I"))
            continue
        mv = motion[t].copy()
        cover = masks.masks[t].reshape(mv.shape[0], block, mv.shape[1], block).mean(axis=(1, 3))
        bad = cover >= 0.5
        mv[bad] = rng.uniform(-24, 24, size=(int(bad.sum()), 2)).round()
        out.append(SideInfo(mv.astype(np.float32), mode))
    return out


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def save_video(path: str | Path, video: VideoSequence) -> None:
    """Write ``video``.

    ``*.vseq`` files are a lossless float32 dump behind a JSON header; any other
    path is treated as a directory of 8-bit PNG frames (lossless for values on
    the 1/255 grid).
    """
    path = Path(path)
    if path.suffix == ".vseq":
        header = json.dumps(
            {"shape": list(video.frames.shape), "dtype": "float32", "fps": video.fps}
        ).encode()
        with open(path, "wb") as fh:
            fh.write(_VSEQ_MAGIC)
            fh.write(struct.pack("<HI", _VSEQ_VERSION, len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(video.frames, dtype="<f4").tobytes())
        return
    if path.suffix:
        raise VideoFormatError(f"unsupported video format: {path.suffix}")
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.frames):
        Image.fromarray(_to_uint8(frame), mode="RGB").save(path / f"{i:05d}.png")


def load_video(path: str | Path, fps: float = 25.0) -> VideoSequence:
    path = Path(path)
    if path.suffix == ".vseq":
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
            if raw[:4] != _VSEQ_MAGIC:
                raise VideoFormatError(f"{path}: bad magic {raw[:4]!r}")
            version, hlen = struct.unpack("<HI", raw[4:10])
            if version != _VSEQ_VERSION:
                raise VideoFormatError(f"{path}: unsupported version {version}")
            header = json.loads(raw[10:10 + hlen].decode())
            shape = tuple(int(s) for s in header["shape"])
            payload = raw[10 + hlen:]
            expected = int(np.prod(shape)) * 4
            if len(payload) != expected:
                raise VideoFormatError(
                    f"{path}: payload has {len(payload)} bytes, header implies {expected}"
                )
            frames = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
            return VideoSequence(frames, float(header.get("fps", fps)))
        except VideoFormatError:
            raise
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise VideoFormatError(f"{path}: corrupt header ({exc})") from exc
    if not path.is_dir():
        raise VideoFormatError(f"unsupported video path: {path}")
    files = sorted(path.glob("*.png"))
    if not files:
        raise VideoFormatError(f"{path}: no frames found")
    frames = []
    for f in files:
        try:
            img = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise VideoFormatError(f"{f}: {exc}") from exc
        if frames and img.shape != frames[0].shape:
            raise VideoFormatError(f"{f}: frame shape {img.shape} differs from {frames[0].shape}")
        frames.append(img)
    return VideoSequence(np.stack(frames), fps)


def save_masks(path: str | Path, masks: MaskSequence) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks.masks):
        Image.fromarray(_to_uint8(m), mode="L").save(path / f"{i:05d}.png")


def load_masks(path: str | Path) -> MaskSequence:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise VideoFormatError(f"{path}: no masks found")
    arr = np.stack([np.asarray(Image.open(f).convert("L")) for f in files])
    return MaskSequence((arr >= 128).astype(np.float32))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class VideoRecord:
    clip_id: str
    corrupted: VideoSequence
    clean: VideoSequence
    gt_masks: MaskSequence
    sideinfo: list[SideInfo]


class ClipDataset:
    """``clips/<id>/{frames,clean,gt_masks}/%05d.png`` plus ``sideinfo.json``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        clip_dir = self.root / "clips"
        if not clip_dir.is_dir():
            raise FileNotFoundError(f"{clip_dir} does not exist")
        self.ids = sorted(p.name for p in clip_dir.iterdir() if p.is_dir())
        self._cache: dict[str, VideoRecord] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> VideoRecord:
        cid = self.ids[index]
        if cid not in self._cache:
            d = self.root / "clips" / cid
            corrupted = load_video(d / "frames")
            clean_dir = d / "clean"
            clean = load_video(clean_dir) if clean_dir.is_dir() else corrupted
            masks = load_masks(d / "gt_masks")
            side = parse_sidecar(d / "sideinfo.json")
            self._cache[cid] = VideoRecord(cid, corrupted, clean, masks, side)
        return self._cache[cid]


class InMemoryDataset:
    def __init__(self, records: Iterable[VideoRecord]):
        self.records = list(records)
        self.ids = [r.clip_id for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> VideoRecord:
        return self.records[index]


def write_record(root: str | Path, record: VideoRecord) -> None:
    d = Path(root) / "clips" / record.clip_id
    save_video(d / "frames", record.corrupted)
    save_video(d / "clean", record.clean)
    save_masks(d / "gt_masks", record.gt_masks)
    write_sidecar(d / "sideinfo.json", record.sideinfo)


def make_synthetic_records(
    seed: int,
    n_clips: int = 8,
    length: int = 8,
    height: int = 64,
    width: int = 64,
    kinds: Sequence[str] = CORRUPTION_KINDS,
    area_fraction: float = 0.25,
    residual_retention: float = 0.2,
) -> list[VideoRecord]:
    root = np.random.SeedSequence(seed)
    records = []
    for i, child in enumerate(root.spawn(n_clips)):
        content_ss, corrupt_ss, side_ss = child.spawn(3)
        clean, motion = synthetic_clean_video(np.random.default_rng(content_ss), length, height, width)
        spec = CorruptionSpec(
            seed=int(corrupt_ss.generate_state(1)[0]),
            kinds=tuple(kinds),
            area_fraction=area_fraction,
            residual_retention=residual_retention,
        )
        corrupted, gt = simulate_corruption(clean, spec)
        # quantize so the PNG dataset round-trips exactly
        corrupted = VideoSequence(np.round(corrupted.frames * 255.0) / 255.0)
        side = simulate_sideinfo(motion, gt, np.random.default_rng(side_ss))
        records.append(VideoRecord(f"{i:04d}", corrupted, clean, gt, side))
    return records


def sample_clip(dataset, index: int, n_local: int = 5, n_nonlocal: int = 3, seed: int = 0) -> ClipSample:
    """Consecutive local frames plus seeded non-local references from the rest."""
    rec = dataset[index]
    length = len(rec.corrupted)
    if length < n_local + n_nonlocal:
        raise ValueError(
            f"clip {rec.clip_id} has {length} frames, need {n_local + n_nonlocal}"
        )
    rng = np.random.default_rng([seed, index])
    start = int(rng.integers(0, length - n_local + 1))
    local = list(range(start, start + n_local))
    rest = [i for i in range(length) if i not in local]
    nonlocal_ = sorted(int(i) for i in rng.choice(rest, size=n_nonlocal, replace=False))
    return ClipSample(
        local_frames=rec.corrupted.subset(local),
        nonlocal_frames=rec.corrupted.subset(nonlocal_),
        gt_masks=rec.gt_masks.subset(local),
        sideinfo=[rec.sideinfo[i] for i in local],
        clean_frames=rec.clean.subset(local),
        local_indices=local,
        nonlocal_indices=nonlocal_,
        nonlocal_gt_masks=rec.gt_masks.subset(nonlocal_),
        nonlocal_sideinfo=[rec.sideinfo[i] for i in nonlocal_],
    )
