"""Adam training loop for the reconstruction + constriction objective."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import ClipDataset, split_batches
from .losses import LossConfig, Mode, constriction_loss, reconstruction_loss, total_loss
from .model import Autoencoder
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_r", "l_c", "l_total", "latent_norm_mean", "latent_norm_max")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    clip_stride: int = 1
    checkpoint_path: str | None = None
    log_every: int = 50

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")
        if self.epochs < 0 or self.batch_size < 1 or self.clip_stride < 1:
            raise ValueError("epochs must be >= 0, batch_size and clip_stride >= 1")


@dataclass
class StepRecord:
    step: int
    l_r: float
    l_c: float
    l_total: float
    latent_norm_mean: float
    latent_norm_max: float


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    epochs_completed: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r.step] + [repr(float(getattr(r, c))) for c in LOG_COLUMNS[1:]])


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A missing gradient counts as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise TrainingAborted(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif state.m[name].shape != p.shape:
            raise ValueError(f"Adam state for {name!r} has shape {state.m[name].shape}, parameter is {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return state


def latent_norms(F: Tensor | np.ndarray) -> np.ndarray:
    """Per-location latent norms, ``(N, H', W')`` for a batched latent."""
    data = F.data if isinstance(F, Tensor) else np.asarray(F)
    return np.sqrt(np.sum(np.square(data.astype(np.float64)), axis=(-4, -3)))


def train_step(model: Autoencoder, X: np.ndarray, loss_cfg: LossConfig) -> tuple[StepRecord, dict[str, np.ndarray]]:
    model.zero_grad()
    x = Tensor(X, dtype=model.dtype)
    X_hat, F = model.forward(x)
    l_r = reconstruction_loss(X_hat, x)
    l_c = constriction_loss(F, loss_cfg) if loss_cfg.mode is not Mode.NONE else None
    loss = total_loss(l_r, l_c, loss_cfg.lam)
    T.backward(loss)
    norms = latent_norms(F)
    rec = StepRecord(0, l_r.item(), l_c.item() if l_c is not None else 0.0, loss.item(), float(norms.mean()), float(norms.max()))
    return rec, {k: p.grad for k, p in model.params.items()}


def train(
    model: Autoencoder,
    dataset: ClipDataset,
    config: TrainConfig,
    state: AdamState | None = None,
) -> tuple[Autoencoder, TrainLog]:
    """Fit ``model`` in place on a normal-only training split.

    Clips are reshuffled every epoch from ``(seed, epoch)``. A checkpoint is
    written after each completed epoch when ``checkpoint_path`` is set; a
    non-finite loss or gradient raises :class:`TrainingAborted` and leaves the
    last epoch's checkpoint untouched.
    """
    if any(dataset.videos[v].labels.any() for v in dataset.videos):
        raise ValueError("training split contains anomalous frames; train on normal data only")
    state = state or AdamState()
    tlog = TrainLog()
    entries = dataset.index.entries[:: config.clip_stride] if config.clip_stride > 1 else dataset.index.entries
    step = 0
    for epoch in range(config.epochs):
        seed = int(np.random.SeedSequence([config.seed, epoch]).generate_state(1)[0])
        for batch in split_batches(entries, config.batch_size, seed):
            step += 1
            try:
                rec, grads = train_step(model, dataset.batch(batch), config.loss)
                adam_step(model.params, grads, state, config.learning_rate, config.beta1, config.beta2, config.epsilon)
            except NonFiniteError as exc:
                raise TrainingAborted(f"training diverged at step {step} (epoch {epoch + 1}): {exc}") from exc
            rec.step = step
            tlog.records.append(rec)
            if config.log_every and step % config.log_every == 0:
                log.info(
                    "epoch %d step %d  l_r=%.5f l_c=%.4f norm mean=%.3f max=%.3f",
                    epoch + 1, step, rec.l_r, rec.l_c, rec.latent_norm_mean, rec.latent_norm_max,
                )
        tlog.epochs_completed = epoch + 1
        if config.checkpoint_path:
            model.save(config.checkpoint_path)
    model.zero_grad()
    return model, tlog
