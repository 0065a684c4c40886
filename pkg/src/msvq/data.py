"""Clip ingestion and preprocessing, dataset splits, synthetic clips.

On disk a clip is a directory of binary P6 frames named ``frame_00000.ppm``,
... and a dataset is a directory holding ``manifest.jsonl`` (one JSON record
per clip: id, class, path, frames, fps, split) next to the clip directories.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, ValidationError

CLIP_FRAMES = 32
CLIP_FPS = 16
FRAME_SIZE = (64, 64)
MANIFEST_NAME = "manifest.jsonl"
SPLITS = ("train", "val", "test")


@dataclass
class VideoClip:
    data: np.ndarray  # (3, T, H, W), values in [0, 1]
    fps: int = CLIP_FPS

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise DimensionError(f"clip must be (3, T, H, W), got {self.data.shape}")
        if self.fps < 1:
            raise ValidationError("fps must be positive")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValidationError("clip values must lie in [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


# ---------------------------------------------------------------------------
# P6 portable pixmaps
# ---------------------------------------------------------------------------

_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path) -> np.ndarray:
    """Binary P6 file with maxval 255 -> uint8 array (H, W, 3)."""
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PPM_TOKEN.match(data, pos)
        if not m:
            raise ValidationError(f"{path}: malformed pixmap header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P6":
        raise ValidationError(f"{path}: not a binary P6 pixmap")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValidationError(f"{path}: malformed pixmap header") from None
    if maxval != 255 or width < 1 or height < 1:
        raise ValidationError(f"{path}: only 8-bit (maxval 255) pixmaps are supported")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ValidationError(f"{path}: malformed pixmap header")
    pos += 1
    need = width * height * 3
    if len(data) - pos < need:
        raise ValidationError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3).copy()


def write_ppm(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8 or frame.ndim != 3 or frame.shape[2] != 3:
        raise ValidationError("write_ppm expects a uint8 (H, W, 3) array")
    h, w, _ = frame.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(frame).tobytes())


def frame_paths(clip_dir) -> list[Path]:
    paths = sorted(Path(clip_dir).glob("*.ppm"))
    if not paths:
        raise ValidationError(f"{clip_dir}: no .ppm frames found")
    return paths


# ---------------------------------------------------------------------------
# bicubic resize
# ---------------------------------------------------------------------------


def cubic_kernel(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def cubic_taps(n_in: int, n_out: int, a: float = -0.5):
    """Source indices and weights (n_out x 4) for pixel-centre aligned,
    edge-clamped bicubic resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    offsets = np.arange(-1, 3)
    idx = base[:, None] + offsets[None, :]
    weights = cubic_kernel(src[:, None] - idx, a)
    return np.clip(idx, 0, n_in - 1), weights


def resize_planes(planes: np.ndarray, size: tuple[int, int], a: float = -0.5) -> np.ndarray:
    """Bicubic resize of ``(P, H, W)`` planes to ``(P, *size)`` (no clipping)."""
    planes = np.asarray(planes, dtype=np.float64)
    _, h, w = planes.shape
    ho, wo = size
    if (h, w) == (ho, wo):
        return planes.copy()
    ri, rw = cubic_taps(h, ho, a)
    ci, cw = cubic_taps(w, wo, a)
    return kernels.resample(planes, ri, rw, ci, cw)


def frames_to_clip(frames: np.ndarray, size: Optional[tuple[int, int]] = FRAME_SIZE,
                   fps: int = CLIP_FPS) -> VideoClip:
    """uint8 frames ``(T, H, W, 3)`` -> normalized, resized ``VideoClip``."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise DimensionError(f"frames must be (T, H, W, 3), got {frames.shape}")
    t, h, w, _ = frames.shape
    planes = frames.transpose(3, 0, 1, 2).reshape(3 * t, h, w).astype(np.float64) / 255.0
    if size is not None:
        planes = np.clip(resize_planes(planes, size), 0.0, 1.0)
    return VideoClip(planes.reshape(3, t, *planes.shape[1:]), fps)


def read_frames(clip_dir) -> np.ndarray:
    frames = [read_ppm(p) for p in frame_paths(clip_dir)]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValidationError(f"{clip_dir}: inconsistent frame sizes {sorted(shapes)}")
    return np.stack(frames)


def ingest_frames(clip_dir, size: Optional[tuple[int, int]] = FRAME_SIZE,
                  fps: int = CLIP_FPS) -> VideoClip:
    return frames_to_clip(read_frames(clip_dir), size, fps)


def write_clip(clip_dir, clip) -> None:
    from .metrics import to_uint8

    data = clip.data if isinstance(clip, VideoClip) else np.asarray(clip)
    frames = to_uint8(data).transpose(1, 2, 3, 0)
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for old in clip_dir.glob("frame_*.ppm"):
        old.unlink()
    for t, frame in enumerate(frames):
        write_ppm(clip_dir / f"frame_{t:05d}.ppm", frame)


# ---------------------------------------------------------------------------
# segmentation and splits
# ---------------------------------------------------------------------------


def segment_clips(frames: Sequence, fps: int, length: int = CLIP_FRAMES,
                  target_fps: int = CLIP_FPS) -> list:
    """Non-overlapping ``length``-frame windows at ``target_fps``.

    Sources at another rate are first resampled by nearest-earlier frame
    selection.  A trailing remainder shorter than ``length`` is dropped.
    """
    if fps is None or fps < 1:
        raise ValidationError("fps metadata is required")
    n = len(frames)
    if fps != target_fps:
        n_out = int(math.floor(n * target_fps / fps))
        picks = [min(n - 1, (i * fps) // target_fps) for i in range(n_out)]
        frames = [frames[i] for i in picks]
        n = len(frames)
    return [frames[s:s + length] for s in range(0, n - length + 1, length)]


@dataclass
class ClipRecord:
    id: str
    label: str
    path: str
    frames: int = CLIP_FRAMES
    fps: int = CLIP_FPS
    split: Optional[str] = None

    def to_json(self) -> str:
        d = asdict(self)
        d["class"] = d.pop("label")
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ClipRecord":
        d = json.loads(line)
        try:
            return cls(id=str(d["id"]), label=str(d["class"]), path=str(d["path"]),
                       frames=int(d["frames"]), fps=int(d["fps"]), split=d.get("split"))
        except KeyError as exc:
            raise ValidationError(f"manifest record missing field {exc}") from None


@dataclass
class Manifest:
    records: list[ClipRecord] = field(default_factory=list)
    seed: Optional[int] = None
    root: Optional[Path] = None

    def split(self, name: str) -> list[ClipRecord]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def clip_dir(self, record: ClipRecord) -> Path:
        return (self.root or Path(".")) / record.path


def apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand the remainder out one by one starting
    from the last split."""
    sizes = [int(math.floor(r * n + 1e-9)) for r in ratios]
    rem = n - sum(sizes)
    i = len(sizes) - 1
    while rem > 0:
        sizes[i] += 1
        rem -= 1
        i = i - 1 if i > 0 else len(sizes) - 1
    return sizes


def split_dataset(manifest: Manifest, ratios: Sequence[float] = (0.7, 0.15, 0.15),
                  seed: int = 0) -> Manifest:
    """Class-preserving seeded split into train/val/test."""
    if not manifest.records:
        raise ValidationError("cannot split an empty manifest")
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[ClipRecord]] = {}
    for rec in manifest.records:
        by_class.setdefault(rec.label, []).append(rec)
    assignment: dict[str, str] = {}
    for label in sorted(by_class):
        recs = sorted(by_class[label], key=lambda r: r.id)
        order = rng.permutation(len(recs))
        sizes = apportion(len(recs), ratios)
        bounds = np.cumsum([0] + sizes)
        for s, name in enumerate(SPLITS):
            for j in order[bounds[s]:bounds[s + 1]]:
                assignment[recs[j].id] = name
    records = [ClipRecord(r.id, r.label, r.path, r.frames, r.fps, assignment[r.id])
               for r in manifest.records]
    return Manifest(records, seed, manifest.root)


def write_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in manifest.records))


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    records = [ClipRecord.from_json(line) for line in path.read_text().splitlines() if line.strip()]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate clip ids")
    return Manifest(records, None, path.parent)


def load_clip(manifest: Manifest, record: ClipRecord) -> np.ndarray:
    return ingest_frames(manifest.clip_dir(record), size=None, fps=record.fps).data


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def synth_clip(seed: int, t: int = CLIP_FRAMES, h: int = FRAME_SIZE[0],
               w: int = FRAME_SIZE[1]) -> VideoClip:
    """A seeded moving-rectangle scene over a smooth colour gradient.

    The rectangle bounces inside the frame, moving exactly one pixel per
    frame horizontally (a unit step never stalls on reflection) and one or
    two pixels vertically.
    """
    if min(t, h, w) < 1:
        raise ValidationError("synthetic clip dims must be positive")
    rng = np.random.default_rng(seed)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    fg = rng.uniform(0.0, 1.0, size=3)
    # keep the object visibly distinct from the background
    fg = np.where(np.abs(fg - (c0 + c1) / 2) < 0.3, 1.0 - fg, fg)
    rh = max(1, int(rng.integers(max(1, h // 5), max(2, h // 2))))
    rw = max(1, int(rng.integers(max(1, w // 5), max(2, w // 2))))
    vy = int(rng.choice([-2, -1, 1, 2]))
    vx = int(rng.choice([-1, 1]))
    y0 = int(rng.integers(0, max(1, h - rh + 1)))
    x0 = int(rng.integers(0, max(1, w - rw + 1)))

    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    background = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    def bounce(p, span):
        if span <= 0:
            return 0
        q = p % (2 * span)
        return q if q <= span else 2 * span - q

    data = np.empty((3, t, h, w), dtype=np.float64)
    for i in range(t):
        y = bounce(y0 + vy * i, h - rh)
        x = bounce(x0 + vx * i, w - rw)
        frame = background.copy()
        frame[:, y:y + rh, x:x + rw] = fg[:, None, None]
        data[:, i] = frame
    return VideoClip(np.clip(data, 0.0, 1.0), CLIP_FPS)


def synth_dataset(out_dir, n: int, seed: int = 0, t: int = CLIP_FRAMES,
                  h: int = FRAME_SIZE[0], w: int = FRAME_SIZE[1],
                  ratios: Sequence[float] = (0.7, 0.15, 0.15)) -> Manifest:
    """Write ``n`` synthetic clip directories plus a split manifest."""
    if n < 1:
        raise ValidationError("need at least one clip")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        cid = f"synth_{seed}_{i:05d}"
        write_clip(out / cid, synth_clip(seed * 100003 + i, t, h, w))
        records.append(ClipRecord(cid, "synthetic", cid, t, CLIP_FPS))
    manifest = split_dataset(Manifest(records, seed, out), ratios, seed)
    write_manifest(out / MANIFEST_NAME, manifest)
    return manifest


def ingest_tree(frames_root, out_dir, fps: int = CLIP_FPS, size=FRAME_SIZE,
                ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> Manifest:
    """Resize, segment and split a tree ``<root>/<class>/<video>/*.ppm``.

    Any directory containing frames is a video; its parent directory name is
    the class label (``unlabeled`` when frames sit directly under the root).
    """
    root = Path(frames_root)
    if not root.is_dir():
        raise ValidationError(f"frames directory not found: {root}")
    videos = sorted({p.parent for p in root.rglob("*.ppm")})
    if not videos:
        raise ValidationError(f"{root}: no .ppm frames found")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for vid in videos:
        label = vid.parent.name if vid != root else "unlabeled"
        rel = vid.relative_to(root)
        stem = "_".join(rel.parts) if rel.parts else root.name
        paths = frame_paths(vid)
        for k, chunk in enumerate(segment_clips(paths, fps)):
            frames = [read_ppm(p) for p in chunk]
            if len({f.shape for f in frames}) != 1:
                raise ValidationError(f"{vid}: inconsistent frame sizes")
            clip = frames_to_clip(np.stack(frames), size, CLIP_FPS)
            cid = f"{stem}_{k:04d}"
            write_clip(out / cid, clip)
            records.append(ClipRecord(cid, label, cid, CLIP_FRAMES, CLIP_FPS))
    if not records:
        raise ValidationError(f"{root}: no video has {CLIP_FRAMES} frames")
    manifest = split_dataset(Manifest(records, seed, out), ratios, seed)
    write_manifest(out / MANIFEST_NAME, manifest)
    return manifest
