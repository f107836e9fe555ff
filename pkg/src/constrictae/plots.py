"""Dependency-free SVG line charts for score timelines and ROC curves."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .scoring import EvalReport, roc_curve

W, H, PAD = 640, 240, 36


def _polyline(xs, ys, x_range, y_range, color: str, width: float = 1.5) -> str:
    (x0, x1), (y0, y1) = x_range, y_range
    sx = (W - 2 * PAD) / ((x1 - x0) or 1)
    sy = (H - 2 * PAD) / ((y1 - y0) or 1)
    pts = " ".join(f"{PAD + (x - x0) * sx:.2f},{H - PAD - (y - y0) * sy:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'


def _frame(title: str, body: Sequence[str]) -> str:
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            '<rect width="100%" height="100%" fill="white"/>',
            f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" fill="none" stroke="#888"/>',
            f'<text x="{PAD}" y="{PAD - 10}" font-family="sans-serif" font-size="13">{escape(title)}</text>',
            *body,
            "</svg>",
        ]
    )


def score_timeline_svg(video_id: str, anomaly: np.ndarray, labels: np.ndarray) -> str:
    n = len(anomaly)
    body = []
    # shade labelled anomalous frames
    sx = (W - 2 * PAD) / max(n - 1, 1)
    for t in np.flatnonzero(labels):
        body.append(f'<rect x="{PAD + (t - 0.5) * sx:.2f}" y="{PAD}" width="{sx:.2f}" height="{H - 2 * PAD}" fill="#f6c6c6"/>')
    body.append(_polyline(range(n), anomaly, (0, max(n - 1, 1)), (0, 1), "#c0392b"))
    return _frame(f"{video_id}: anomaly score per frame (shaded = labelled anomalous)", body)


def roc_svg(report: EvalReport) -> str:
    scores, labels = report.pooled()
    fpr, tpr = roc_curve(scores, labels)
    body = [
        _polyline([0, 1], [0, 1], (0, 1), (0, 1), "#bbb", 1.0),
        _polyline(fpr, tpr, (0, 1), (0, 1), "#2c3e50", 2.0),
    ]
    return _frame(f"frame-level ROC, AUC = {report.auc:.4f}", body)


def write_report_plots(report: EvalReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in report.series:
        p = out_dir / f"timeline_{s.video_id}.svg"
        p.write_text(score_timeline_svg(s.video_id, s.anomaly, s.labels), encoding="utf-8")
        paths.append(p)
    p = out_dir / "roc.svg"
    p.write_text(roc_svg(report), encoding="utf-8")
    paths.append(p)
    return paths
