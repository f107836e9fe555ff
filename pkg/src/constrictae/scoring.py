"""Frame-level anomaly scoring from reconstruction PSNR, and ROC AUC."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import ClipDataset
from .model import Autoencoder
from .tensor import Tensor

PSNR_PEAK = 2.0
MSE_FLOOR = 1e-10


def psnr(frame: np.ndarray, recon: np.ndarray, peak: float = PSNR_PEAK) -> float:
    frame, recon = np.asarray(frame, dtype=np.float64), np.asarray(recon, dtype=np.float64)
    if frame.shape != recon.shape:
        raise ValueError(f"psnr: shape mismatch between {frame.shape} and {recon.shape}")
    if not peak > 0:
        raise ValueError(f"psnr: peak must be positive, got {peak}")
    mse = max(float(np.mean(np.square(frame - recon))), MSE_FLOOR)
    return 10.0 * math.log10(peak * peak / mse)


def scoring_offset(clip_len: int) -> int:
    """0-based position of the scored frame inside a window: ``ceil(T/2)``.

    Gives the 9th of 16 frames and the 5th of 8.
    """
    return math.ceil(clip_len / 2)


@dataclass
class ScoreSeries:
    video_id: str
    psnr: np.ndarray
    labels: np.ndarray
    normalcy: np.ndarray = field(default=None)
    anomaly: np.ndarray = field(default=None)

    def __post_init__(self):
        self.psnr = np.asarray(self.psnr, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.psnr):
            raise ValueError(f"{self.video_id}: {len(self.psnr)} scores for {len(self.labels)} labels")
        if self.normalcy is None:
            self.normalcy = minmax_normalize(self.psnr)
        if self.anomaly is None:
            self.anomaly = anomaly_score(self.normalcy)


def minmax_normalize(values: Sequence[float]) -> np.ndarray:
    """Rescale to [0, 1] within the series; a constant series maps to all ones."""
    p = np.asarray(values, dtype=np.float64)
    if p.size == 0:
        raise ValueError("minmax_normalize of an empty series")
    lo, hi = p.min(), p.max()
    if hi == lo:
        return np.ones_like(p)
    return (p - lo) / (hi - lo)


def anomaly_score(normalcy: Sequence[float]) -> np.ndarray:
    return 1.0 - np.asarray(normalcy, dtype=np.float64)


def scored_reconstructions(model: Autoencoder, frames: np.ndarray, batch_size: int = 16) -> tuple[int, np.ndarray]:
    """Reconstruct the scored frame of every stride-1 window of a video.

    ``frames`` is a normalized video ``(n, C, H, W)``. Returns the 0-based
    index of the first scored frame and an array ``(n - T + 1, C, H, W)`` of
    reconstructions, one per window.
    """
    clip_len = model.config.input_shape[0]
    n = len(frames)
    if n < clip_len:
        raise ValueError(f"video has {n} frames, fewer than the clip length {clip_len}")
    off = scoring_offset(clip_len)
    starts = np.arange(n - clip_len + 1)
    recon = np.empty((len(starts),) + frames.shape[1:])
    for i in range(0, len(starts), batch_size):
        chunk = starts[i : i + batch_size]
        X = np.stack([frames[s : s + clip_len] for s in chunk])
        X_hat, _ = model.forward(Tensor(X, dtype=model.dtype))
        recon[i : i + len(chunk)] = X_hat.data[:, off]
    return off, recon


def video_psnr(model: Autoencoder, frames: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """PSNR for every frame of a normalized video ``(n, C, H, W)``.

    A window of ``T`` frames slides with stride 1; each window scores its frame
    at :func:`scoring_offset`. Frames no window scores take the nearest scored
    value.
    """
    off, recon = scored_reconstructions(model, frames, batch_size)
    scored = np.array([psnr(frames[off + i], r) for i, r in enumerate(recon)])
    out = np.empty(len(frames))
    out[off : off + len(scored)] = scored
    out[:off] = scored[0]
    out[off + len(scored) :] = scored[-1]
    return out


def score_video(model: Autoencoder, dataset: ClipDataset, video_id: str) -> ScoreSeries:
    frames = dataset.video_frames(video_id)
    return ScoreSeries(video_id, video_psnr(model, frames), dataset.videos[video_id].labels)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic with midranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"roc_auc: {s.shape} scores for {y.shape} labels")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """False- and true-positive rates over every distinct threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) == 1
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / max(y.sum(), 1)]
    fpr = np.r_[0.0, fps / max((~y).sum(), 1)]
    return fpr, tpr


def error_heatmap(frame: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Squared reconstruction error min-max normalized within the frame.

    A uniform error map carries no localisation and is returned as zeros.
    """
    frame, recon = np.asarray(frame, dtype=np.float64), np.asarray(recon, dtype=np.float64)
    if frame.shape != recon.shape:
        raise ValueError(f"error_heatmap: shape mismatch between {frame.shape} and {recon.shape}")
    err = np.square(frame - recon)
    lo, hi = err.min(), err.max()
    if hi == lo:
        return np.zeros_like(err)
    return (err - lo) / (hi - lo)


@dataclass
class EvalReport:
    auc: float
    series: list[ScoreSeries]
    config: dict = field(default_factory=dict)

    @property
    def total_frames(self) -> int:
        return sum(len(s.psnr) for s in self.series)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.concatenate([s.anomaly for s in self.series]),
            np.concatenate([s.labels for s in self.series]),
        )

    def to_csv(self, path: str | Path) -> None:
        """Per-frame rows followed by a ``# AUC: <value>`` summary line."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("video_id", "frame", "psnr", "normalcy", "anomaly", "label"))
            for s in self.series:
                for t in range(len(s.psnr)):
                    w.writerow((s.video_id, t, repr(float(s.psnr[t])), repr(float(s.normalcy[t])), repr(float(s.anomaly[t])), int(s.labels[t])))
            fh.write(f"# AUC: {self.auc:.6f}\n")


def read_report_csv(path: str | Path) -> tuple[list[dict], float | None]:
    rows, auc = [], None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    for ln in lines:
        if ln.startswith("# AUC:"):
            auc = float(ln.split(":", 1)[1])
    rows = list(csv.DictReader(body))
    return rows, auc


def evaluate(model: Autoencoder, dataset: ClipDataset, config: dict | None = None) -> EvalReport:
    """Score every test video and compute the pooled frame-level AUC."""
    series = [score_video(model, dataset, vid) for vid in dataset.videos]
    if not series:
        raise ValueError("no test videos to evaluate")
    report = EvalReport(float("nan"), series, dict(config or {}))
    scores, labels = report.pooled()
    report.auc = roc_auc(scores, labels)
    return report
