"""End-to-end runs: resolved configs, train-from-directory, evaluate, sweeps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import ClipDataset, load_clips, read_manifest
from .losses import LossConfig, Mode
from .model import AEConfig, Autoencoder
from .scoring import EvalReport, evaluate
from .tensor import Tensor
from .training import TrainConfig, TrainLog, latent_norms, train

log = logging.getLogger(__name__)

DEFAULT_ALPHA = {Mode.NONE: 1.0, Mode.INSIDE: 1.0, Mode.SURFACE: 10.0}


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one training run, given the dataset bytes."""

    data: str
    clip_len: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)
    model: AEConfig | None = None

    def resolved_model(self) -> AEConfig:
        if self.model is not None:
            return self.model
        h, w = read_manifest(self.data).frame_size
        return AEConfig(
            input_shape=(self.clip_len, 1, h, w),
            drop_last_encoder_activation=self.train.loss.mode is not Mode.NONE,
            seed=self.train.seed,
        )

    def resolve(self) -> "RunConfig":
        return replace(self, model=self.resolved_model())

    def to_dict(self) -> dict:
        d = {"data": self.data, "clip_len": self.clip_len, "train": asdict(self.train)}
        d["train"]["loss"]["mode"] = self.train.loss.mode.value
        if self.model is not None:
            d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        train_d = dict(d.get("train", {}))
        train_d["loss"] = LossConfig(**train_d.get("loss", {}))
        model = AEConfig.from_dict(d["model"]) if d.get("model") else None
        return cls(data=d["data"], clip_len=int(d.get("clip_len", 8)), train=TrainConfig(**train_d), model=model)


def make_run_config(
    data: str | Path,
    mode: str | Mode = Mode.INSIDE,
    lam: float = 1e-4,
    alpha: float | None = None,
    seed: int = 0,
    epochs: int = 40,
    **train_kw,
) -> RunConfig:
    mode = Mode.parse(mode)
    loss = LossConfig(lam=lam, alpha=DEFAULT_ALPHA[mode] if alpha is None else alpha, mode=mode)
    return RunConfig(str(data), train=TrainConfig(epochs=epochs, seed=seed, loss=loss, **train_kw)).resolve()


def write_json(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def train_run(cfg: RunConfig) -> tuple[Autoencoder, TrainLog]:
    cfg = cfg.resolve()
    dataset = load_clips(cfg.data, cfg.clip_len, 1, "train")
    model = Autoencoder(cfg.model)
    return train(model, dataset, cfg.train)


def load_test_split(data: str | Path, clip_len: int) -> ClipDataset:
    return load_clips(data, clip_len, 1, "test")


def evaluate_model(model: Autoencoder, data: str | Path, config: dict | None = None) -> EvalReport:
    return evaluate(model, load_test_split(data, model.config.input_shape[0]), config)


def probe_entries(dataset: ClipDataset, count: int = 32) -> list[tuple[str, int]]:
    """Evenly spaced clips made only of normal frames, for latent statistics."""
    T = dataset.clip_len
    normal = [(v, s) for v, s in dataset.index.entries if not dataset.videos[v].labels[s : s + T].any()]
    if not normal:
        raise ValueError("no all-normal clips available for a probe batch")
    idx = np.unique(np.linspace(0, len(normal) - 1, min(count, len(normal))).round().astype(int))
    return [normal[i] for i in idx]


def probe_latent_norms(model: Autoencoder, dataset: ClipDataset, count: int = 32) -> np.ndarray:
    X = dataset.batch(probe_entries(dataset, count))
    _, F = model.forward(Tensor(X, dtype=model.dtype))
    return latent_norms(F).ravel()


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("mode", "lambda", "alpha", "seed", "auc", "status")


@dataclass
class SweepRow:
    mode: str
    lam: float
    alpha: float
    seed: int
    auc: float | None
    status: str = "ok"

    def as_csv(self) -> list:
        return [self.mode, repr(self.lam), repr(self.alpha), self.seed, "" if self.auc is None else f"{self.auc:.6f}", self.status]


def _cell(data: str, mode: Mode, lam: float, alpha: float, seed: int, epochs: int, train_kw: dict) -> SweepRow:
    try:
        cfg = make_run_config(data, mode, lam, alpha, seed, epochs, **train_kw)
        model, _ = train_run(cfg)
        auc = evaluate_model(model, data).auc
        return SweepRow(mode.value, lam, alpha, seed, auc)
    except Exception as exc:  # one failed cell must not sink the sweep
        log.warning("sweep cell %s lambda=%g alpha=%g seed=%d failed: %s", mode.value, lam, alpha, seed, exc)
        return SweepRow(mode.value, lam, alpha, seed, None, f"error: {type(exc).__name__}: {exc}".replace("\n", " "))


def run_sweep(
    data: str | Path,
    lambdas: list[float],
    alphas: list[float],
    modes: list[Mode],
    seeds: list[int],
    epochs: int = 40,
    jobs: int = 1,
    **train_kw,
) -> list[SweepRow]:
    """Train and evaluate every (mode, lambda, alpha, seed) cell plus one baseline per seed.

    Rows come back sorted by (mode, lambda, alpha, seed). Baseline rows carry
    ``mode="none"``, ``lambda=0`` and ``alpha=0``.
    """
    data = str(data)
    cells = [(Mode.NONE, 0.0, 0.0, s) for s in seeds]
    cells += [(Mode.parse(m), float(l), float(a), s) for m in modes for l in lambdas for a in alphas for s in seeds]
    args = [(data, m, l, a if m is not Mode.NONE else 1.0, s, epochs, train_kw) for m, l, a, s in cells]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_cell_star, args))
    else:
        rows = [_cell(*a) for a in args]
    for row, (m, l, a, s) in zip(rows, cells):
        row.alpha = a
    return sorted(rows, key=lambda r: (r.mode, r.lam, r.alpha, r.seed))


def _cell_star(args) -> SweepRow:
    return _cell(*args)


def write_sweep_csv(path: str | Path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def best_by_cell(rows: list[SweepRow]) -> dict[tuple[str, float, float], float]:
    """Max AUC over seeds for every (mode, lambda, alpha) cell."""
    best: dict[tuple[str, float, float], float] = {}
    for r in rows:
        if r.auc is None:
            continue
        key = (r.mode, r.lam, r.alpha)
        best[key] = max(best.get(key, -1.0), r.auc)
    return best
