"""Synthetic moving-sprite video benchmark and sliding-window clip loading.

Dataset layout on disk::

    <root>/manifest.txt
    <root>/train/<video_id>/000000.pgm ...
    <root>/test/<video_id>/000000.pgm ...

Frames are 8-bit binary PGM (P5). The manifest is line oriented::

    cae-manifest 1
    frame_size <H> <W>
    config <JSON of the generating SynthConfig>      (optional)
    video <split> <video_id> <n_frames> <labels>

``<labels>`` is a string of ``0``/``1`` characters, one per frame. Blank
lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

MANIFEST = "manifest.txt"
MANIFEST_HEADER = "cae-manifest 1"
ANOMALY_KINDS = ("fast_motion", "alien_shape")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    train_videos: int = 8
    test_videos: int = 4
    frames_per_video: int = 64
    sprite_size: int = 6
    speed_range: tuple[float, float] = (0.5, 1.5)
    fast_factor: float = 4.0
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    anomaly_length: int = 16
    background: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))
        object.__setattr__(self, "anomaly_kinds", tuple(self.anomaly_kinds))
        unknown = set(self.anomaly_kinds) - set(ANOMALY_KINDS)
        if unknown:
            raise ValueError(f"unknown anomaly kinds {sorted(unknown)}; known: {ANOMALY_KINDS}")
        if self.fast_factor < 3:
            raise ValueError(f"fast_factor must be >= 3, got {self.fast_factor}")
        if self.sprite_size < 3 or self.sprite_size >= min(self.height, self.width):
            raise ValueError(f"sprite_size {self.sprite_size} does not fit a {self.height}x{self.width} frame")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError(f"speed_range must satisfy 0 < lo <= hi, got {self.speed_range}")
        if self.frames_per_video < 1 or self.anomaly_length < 1:
            raise ValueError("frames_per_video and anomaly_length must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VideoRecord:
    video_id: str
    split: str
    n_frames: int
    labels: np.ndarray
    path: Path

    def __post_init__(self):
        if len(self.labels) != self.n_frames:
            raise DatasetError(f"video {self.video_id}: {len(self.labels)} labels for {self.n_frames} frames")

    def frame_path(self, t: int) -> Path:
        return self.path / f"{t:06d}.pgm"


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _sprite_mask(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    # plus-shaped: a centred bar in each direction, one third of the size wide
    mask = np.zeros((size, size), dtype=bool)
    w = max(1, size // 3)
    lo = (size - w) // 2
    mask[lo : lo + w, :] = True
    mask[:, lo : lo + w] = True
    return mask


def _render_video(
    rng: np.random.Generator,
    cfg: SynthConfig,
    anomaly: str | None,
) -> tuple[np.ndarray, np.ndarray]:
    n, h, w, s = cfg.frames_per_video, cfg.height, cfg.width, cfg.sprite_size
    frames = np.full((n, h, w), cfg.background, dtype=np.uint8)
    labels = np.zeros(n, dtype=np.uint8)

    seg = None
    if anomaly is not None:
        length = min(cfg.anomaly_length, n)
        # keep the segment away from the video edges when there is room
        margin = min(8, (n - length) // 2)
        start = margin + int(rng.integers(0, n - length - 2 * margin + 1))
        seg = (start, start + length)
        labels[seg[0] : seg[1]] = 1

    pos = rng.uniform([0, 0], [h - s, w - s])
    speed = rng.uniform(*cfg.speed_range)
    angle = rng.uniform(0, 2 * math.pi)
    vel = speed * np.array([math.sin(angle), math.cos(angle)])
    intensity = int(rng.integers(180, 256))
    limits = np.array([h - s, w - s], dtype=float)

    for t in range(n):
        in_seg = seg is not None and seg[0] <= t < seg[1]
        kind = "cross" if in_seg and anomaly == "alien_shape" else "square"
        r, c = (int(round(v)) for v in pos)
        frames[t, r : r + s, c : c + s][_sprite_mask(kind, s)] = intensity

        step = vel * (cfg.fast_factor if in_seg and anomaly == "fast_motion" else 1.0)
        pos = pos + step
        for axis in range(2):
            # reflect off the walls, possibly several times for fast sprites
            while pos[axis] < 0 or pos[axis] > limits[axis]:
                if pos[axis] < 0:
                    pos[axis] = -pos[axis]
                else:
                    pos[axis] = 2 * limits[axis] - pos[axis]
                vel[axis] = -vel[axis]
    return frames, labels


def write_pgm(path: Path, frame: np.ndarray) -> None:
    Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "L":
                raise DatasetError(f"{path}: not an 8-bit grayscale PGM (format={img.format}, mode={img.mode})")
            return np.asarray(img, dtype=np.uint8).copy()
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"corrupt frame file {path}: {exc}") from exc


def generate_synthetic(config: SynthConfig, root: str | Path) -> Path:
    """Write a deterministic synthetic benchmark under ``root`` and return it.

    Training videos hold only a bouncing square at normal speed. Every test
    video carries one labelled anomalous segment, cycling through
    ``config.anomaly_kinds``: the sprite speeding up by ``fast_factor`` or
    turning into a cross.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {root}: {exc}") from exc

    rng = np.random.default_rng(config.seed)
    lines = [
        MANIFEST_HEADER,
        f"frame_size {config.height} {config.width}",
        "config " + json.dumps(config.to_dict(), sort_keys=True),
    ]
    plan = [("train", f"train_{i:03d}", None) for i in range(config.train_videos)]
    kinds = config.anomaly_kinds
    plan += [
        ("test", f"test_{i:03d}", kinds[i % len(kinds)] if kinds else None) for i in range(config.test_videos)
    ]
    for split, vid, anomaly in plan:
        frames, labels = _render_video(rng, config, anomaly)
        vdir = root / split / vid
        vdir.mkdir(parents=True, exist_ok=True)
        for stale in vdir.glob("*.pgm"):
            stale.unlink()
        for t, frame in enumerate(frames):
            write_pgm(vdir / f"{t:06d}.pgm", frame)
        lines.append(f"video {split} {vid} {len(frames)} {''.join(map(str, labels))}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


# ---------------------------------------------------------------------------
# Manifest and clip loading
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    root: Path
    frame_size: tuple[int, int]
    videos: list[VideoRecord]
    config: dict | None = None

    def split(self, name: str) -> list[VideoRecord]:
        return [v for v in self.videos if v.split == name]


def read_manifest(root: str | Path) -> Manifest:
    root = Path(root)
    path = root / MANIFEST
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DatasetError(f"{path}: missing '{MANIFEST_HEADER}' header")
    frame_size, videos, config = None, [], None
    for lineno, line in enumerate(lines[1:], start=2):
        key, _, rest = line.partition(" ")
        if key == "frame_size":
            h, w = (int(v) for v in rest.split())
            frame_size = (h, w)
        elif key == "config":
            config = json.loads(rest)
        elif key == "video":
            parts = rest.split()
            if len(parts) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 'video <split> <id> <n> <labels>'")
            split, vid, n, labels = parts
            if split not in ("train", "test"):
                raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
            if set(labels) - {"0", "1"}:
                raise DatasetError(f"{path}:{lineno}: labels must be 0/1 characters")
            videos.append(VideoRecord(vid, split, int(n), np.array([int(c) for c in labels], dtype=np.uint8), root / split / vid))
        else:
            raise DatasetError(f"{path}:{lineno}: unknown manifest key {key!r}")
    if frame_size is None:
        raise DatasetError(f"{path}: missing frame_size line")
    for v in videos:
        if v.split == "train" and v.labels.any():
            raise DatasetError(f"training video {v.video_id} carries anomalous labels")
    return Manifest(root, frame_size, videos, config)


def normalize(frame: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels to [-1, 1] via ``2x/255 - 1``."""
    return frame.astype(np.float64) * (2.0 / 255.0) - 1.0


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5).astype(np.uint8)


def clip_starts(n_frames: int, clip_len: int, stride: int = 1) -> range:
    if n_frames < clip_len:
        return range(0)
    return range(0, n_frames - clip_len + 1, stride)


@dataclass
class ClipIndex:
    entries: list[tuple[str, int]]
    clip_len: int
    stride: int

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


class ClipDataset:
    """Sliding-window clips over one split, loading frames on first use."""

    def __init__(self, manifest: Manifest, split: str, clip_len: int, stride: int = 1):
        if clip_len < 1 or stride < 1:
            raise ValueError(f"clip_len and stride must be positive, got {clip_len}, {stride}")
        self.manifest = manifest
        self.split = split
        self.videos = {v.video_id: v for v in manifest.split(split)}
        entries = []
        for v in self.videos.values():
            starts = clip_starts(v.n_frames, clip_len, stride)
            if not starts:
                warnings.warn(
                    f"video {v.video_id} has {v.n_frames} frames, shorter than clip length {clip_len}; no clips",
                    stacklevel=2,
                )
            entries.extend((v.video_id, s) for s in starts)
        self.index = ClipIndex(entries, clip_len, stride)
        self._frames = lru_cache(maxsize=None)(self._load_video)

    @property
    def clip_len(self) -> int:
        return self.index.clip_len

    def __len__(self) -> int:
        return len(self.index)

    def _load_video(self, video_id: str) -> np.ndarray:
        v = self.videos[video_id]
        h, w = self.manifest.frame_size
        frames = np.empty((v.n_frames, h, w), dtype=np.uint8)
        for t in range(v.n_frames):
            path = v.frame_path(t)
            if not path.exists():
                raise DatasetError(f"missing frame file {path}")
            frame = read_pgm(path)
            if frame.shape != (h, w):
                raise DatasetError(f"frame file {path} has size {frame.shape}, manifest says {(h, w)}")
            frames[t] = frame
        return frames

    def raw_frames(self, video_id: str) -> np.ndarray:
        """All stored 8-bit frames of a video, ``(n, H, W)``."""
        return self._frames(video_id)

    def video_frames(self, video_id: str) -> np.ndarray:
        """All frames of a video normalized to [-1, 1], ``(n, 1, H, W)``."""
        return normalize(self._frames(video_id))[:, None]

    def clip(self, video_id: str, start: int) -> np.ndarray:
        frames = self._frames(video_id)
        if start < 0 or start + self.clip_len > len(frames):
            raise IndexError(f"clip [{start}, {start + self.clip_len}) out of range for {video_id}")
        return normalize(frames[start : start + self.clip_len])[:, None]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.clip(*self.index.entries[i])

    def __iter__(self) -> Iterator[np.ndarray]:
        for vid, start in self.index.entries:
            yield self.clip(vid, start)

    def batch(self, entries: Sequence[tuple[str, int]]) -> np.ndarray:
        """Stack clips into ``(N, T, 1, H, W)``."""
        return np.stack([self.clip(vid, s) for vid, s in entries])


def load_clips(root: str | Path, clip_len: int, stride: int = 1, split: str = "train") -> ClipDataset:
    return ClipDataset(read_manifest(root), split, clip_len, stride)


def split_batches(
    entries: Sequence[tuple[str, int]] | ClipIndex,
    batch_size: int,
    shuffle_seed: int | None = None,
) -> list[list[tuple[str, int]]]:
    """Chop clip entries into batches, shuffled first when a seed is given.

    The final partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    entries = list(entries)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(entries))
        entries = [entries[i] for i in order]
    return [entries[i : i + batch_size] for i in range(0, len(entries), batch_size)]
