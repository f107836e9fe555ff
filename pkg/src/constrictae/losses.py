"""Training objective: reconstruction error plus latent-norm constriction."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import tensor as T
from .tensor import ShapeError, Tensor


class Mode(str, Enum):
    NONE = "none"
    INSIDE = "inside_sphere"
    SURFACE = "on_surface"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        aliases = {"inside": cls.INSIDE, "surface": cls.SURFACE}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            choices = ", ".join([m.value for m in cls] + list(aliases))
            raise ValueError(f"unknown constriction mode {value!r} (choose from {choices})") from None


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-4
    alpha: float = 1.0
    mode: Mode = Mode.INSIDE

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def reconstruction_loss(X_hat: Tensor, X: Tensor) -> Tensor:
    """Mean squared reconstruction error over every element (and the batch)."""
    if X_hat.shape != X.shape:
        raise ShapeError(f"reconstruction_loss: shape mismatch between {X_hat.shape} and {X.shape}")
    return T.mean_squared(T.sub(X_hat, X))


def _location_norms(F: Tensor) -> Tensor:
    if F.ndim not in (4, 5):
        raise ShapeError(f"latent must be (T', C', H', W') or batched, got shape {F.shape}")
    return T.l2_norm_per_location(F)


def constriction_inside(F: Tensor, alpha: float) -> Tensor:
    """Mean over locations of ``max(0, ||F_ji|| - alpha)``; zero inside the ball."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return T.mean(T.max_with_zero(T.sub(_location_norms(F), alpha)))


def constriction_surface(F: Tensor, alpha: float) -> Tensor:
    """Mean over locations of ``| ||F_ji|| - alpha |``; zero only on the sphere."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return T.mean(T.abs(T.sub(_location_norms(F), alpha)))


def constriction_loss(F: Tensor, config: LossConfig) -> Tensor | None:
    if config.mode is Mode.INSIDE:
        return constriction_inside(F, config.alpha)
    if config.mode is Mode.SURFACE:
        return constriction_surface(F, config.alpha)
    return None


def total_loss(l_r: Tensor, l_c: Tensor | None, lam: float) -> Tensor:
    """``l_r + lam * l_c``; returns ``l_r`` itself when there is nothing to add."""
    if l_c is None or lam == 0:
        return l_r
    return T.add(l_r, T.scalar_mul(l_c, lam))
