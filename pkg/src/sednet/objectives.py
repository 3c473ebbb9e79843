"""Segmentation losses: binary cross-entropy, soft dice and their weighted sums."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class LossValidationError(ValueError):
    pass


class Variant(str, enum.Enum):
    BCE = "bce"
    BCED = "bced"
    BCESD = "bcesd"
    WBCESD_E = "wbcesd-e"
    WBCESD_P = "wbcesd-p"


VARIANTS = tuple(v.value for v in Variant)

_DEFAULT_WEIGHTS = {Variant.WBCESD_E: (0.5, 0.5), Variant.WBCESD_P: (0.7, 0.3)}


@dataclass(frozen=True)
class LossConfig:
    variant: Variant = Variant.WBCESD_P
    epsilon: float = 1e-6
    w_a: float | None = None
    w_b: float | None = None
    clamp: float = 1e-7

    def __post_init__(self):
        try:
            variant = Variant(self.variant)
        except ValueError:
            raise LossValidationError(
                f"unknown loss variant {self.variant!r}; expected one of {', '.join(VARIANTS)}"
            ) from None
        object.__setattr__(self, "variant", variant)
        if variant in _DEFAULT_WEIGHTS:
            w_a, w_b = self.w_a, self.w_b
            if w_a is None and w_b is None:
                w_a, w_b = _DEFAULT_WEIGHTS[variant]
            elif w_a is None:
                w_a = 1.0 - w_b
            elif w_b is None:
                w_b = 1.0 - w_a
            object.__setattr__(self, "w_a", float(w_a))
            object.__setattr__(self, "w_b", float(w_b))
        if self.epsilon <= 0:
            raise LossValidationError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.clamp < 0.5:
            raise LossValidationError(f"clamp must lie in (0, 0.5), got {self.clamp}")
        if variant in _DEFAULT_WEIGHTS:
            if self.w_a < 0 or self.w_b < 0 or abs(self.w_a + self.w_b - 1.0) > 1e-9:
                raise LossValidationError(
                    f"weights must be nonnegative and sum to 1, got w_a={self.w_a}, w_b={self.w_b}"
                )
            if variant is Variant.WBCESD_E and self.w_a != self.w_b:
                raise LossValidationError("wbcesd-e uses equal weights")
            if variant is Variant.WBCESD_P and not self.w_a > self.w_b:
                raise LossValidationError(
                    f"wbcesd-p needs w_a > w_b, got w_a={self.w_a}, w_b={self.w_b}"
                )

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "epsilon": self.epsilon,
                "w_a": self.w_a, "w_b": self.w_b, "clamp": self.clamp}


def _check(prediction, target):
    p = prediction if isinstance(prediction, Tensor) else Tensor(np.asarray(prediction, dtype=np.float64))
    g = np.asarray(target)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} differ in shape")
    if not np.isin(g, (0, 1)).all():
        bad = g[~np.isin(g, (0, 1))].flat[0]
        raise LossValidationError(f"target must be binary, found value {bad}")
    return p, Tensor(g.astype(p.dtype))


def bce(prediction, target, cfg: LossConfig | None = None) -> Tensor:
    """Mean binary cross-entropy over every pixel and channel."""
    cfg = cfg or LossConfig()
    p, g = _check(prediction, target)
    p = T.clip(p, cfg.clamp, 1.0 - cfg.clamp)
    ll = g * T.log(p) + (1.0 - g) * T.log(1.0 - p)
    return -T.mean(ll)


def _spatial_axes(p: Tensor) -> tuple[int, ...]:
    return tuple(range(p.data.ndim - 1))


def soft_dice(prediction, target, cfg: LossConfig | None = None) -> Tensor:
    """Negative soft dice per channel, averaged over channels. Range [-1, 0]."""
    cfg = cfg or LossConfig()
    p, g = _check(prediction, target)
    axes = _spatial_axes(p)
    inter = T.sum(p * g, axis=axes)
    denom = T.sum(p, axis=axes) + T.sum(g, axis=axes) + cfg.epsilon
    return -T.mean((2.0 * inter + cfg.epsilon) / denom)


def hard_dice(prediction, target, cfg: LossConfig | None = None, threshold: float = 0.5) -> Tensor:
    """Soft dice evaluated on thresholded predictions. Carries no gradient."""
    cfg = cfg or LossConfig()
    p, g = _check(prediction, target)
    hard = (p.data >= threshold).astype(p.dtype)
    return soft_dice(Tensor(hard), g.data, cfg)


def combine(variant, bce_value, dice_value, cfg: LossConfig | None = None):
    """Mix a cross-entropy term and a dice term according to ``variant``.

    Works on plain floats as well as tensors, so sub-losses can be injected.
    """
    variant = Variant(variant)
    if cfg is None or cfg.variant is not variant:
        cfg = LossConfig(variant=variant)
    if variant is Variant.BCE:
        return bce_value
    if variant in (Variant.BCED, Variant.BCESD):
        return bce_value + dice_value
    return cfg.w_a * bce_value + cfg.w_b * dice_value


def combined_loss(prediction, target, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    l = bce(prediction, target, cfg)
    v = cfg.variant
    if v is Variant.BCE:
        return l
    if v is Variant.BCED:
        return combine(v, l, hard_dice(prediction, target, cfg), cfg)
    return combine(v, l, soft_dice(prediction, target, cfg), cfg)
