"""Segmentation losses: BCE, focal, Dice and the focal+Dice hybrid.

All losses take a binary target ``y`` (numpy array or constant tensor) and
a probability tensor ``yhat`` of the same shape, and return a scalar
tensor that can be differentiated with :func:`segattack.autodiff.backward`.

BCE and focal support two reductions: ``"sum"`` over every pixel of every
channel and sample, and ``"mean"`` (the sum divided by the element count).
Training uses the mean. Dice is always averaged over (sample, channel)
pairs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1e-6
KINDS = ("bce", "focal", "dice", "hybrid_focal_dice")
SELECTORS = {"bce": "bce", "focal": "focal", "dice": "dice", "focal+dice": "hybrid_focal_dice"}

Target = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class LossKind:
    kind: str = "hybrid_focal_dice"
    gamma: float = 2.0
    w_dice: float = 1.0
    w_focal: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.w_dice < 0 or self.w_focal < 0 or (self.w_dice == 0 and self.w_focal == 0):
            raise ValueError(f"hybrid weights must be >= 0 and not both zero: {(self.w_dice, self.w_focal)}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")

    @classmethod
    def parse(cls, selector: str, **kwargs) -> "LossKind":
        """Build from a config selector: ``bce``, ``focal``, ``dice`` or ``focal+dice``."""
        try:
            kind = SELECTORS[selector]
        except KeyError:
            raise ValueError(f"unknown loss selector {selector!r}; expected one of {sorted(SELECTORS)}")
        return cls(kind=kind, **kwargs)

    @property
    def selector(self) -> str:
        return {v: k for k, v in SELECTORS.items()}[self.kind]

    @property
    def hybrid_weights(self) -> Tuple[float, float]:
        return self.w_dice, self.w_focal

    def __call__(self, y: Target, yhat: Tensor) -> Tensor:
        return compute_loss(self, y, yhat)


def _target(y: Target, yhat: Tensor) -> np.ndarray:
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    if yd.shape != yhat.shape:
        raise ad.ShapeError(f"target shape {yd.shape} does not match prediction shape {yhat.shape}")
    if not np.all((yd == 0) | (yd == 1)):
        raise ValueError("target mask must be binary (values in {0, 1})")
    return yd.astype(yhat.dtype, copy=False)


def _reduce(t: Tensor, reduction: str) -> Tensor:
    return ad.reduce_sum(t) if reduction == "sum" else ad.reduce_mean(t)


def y_transform(y: Target, yhat: Tensor) -> Tensor:
    """Probability assigned to the true class: ``yhat`` where ``y == 1``, else ``1 - yhat``."""
    yd = _target(y, yhat)
    return ad.where_const(yd == 1, yhat, ad.add_const(ad.scale_const(yhat, -1.0), 1.0))


def _clamped_pt(y: Target, yhat: Tensor) -> Tensor:
    return y_transform(y, ad.clip(yhat, PROB_CLAMP, 1.0 - PROB_CLAMP))


def bce_loss(y: Target, yhat: Tensor, reduction: str = "mean") -> Tensor:
    """``-sum log(pt)`` (or its mean) with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    pt = _clamped_pt(y, yhat)
    return ad.scale_const(_reduce(ad.log(pt), reduction), -1.0)


def focal_loss(y: Target, yhat: Tensor, gamma: float = 2.0, reduction: str = "mean") -> Tensor:
    pt = _clamped_pt(y, yhat)
    modulator = ad.pow_const(ad.add_const(ad.scale_const(pt, -1.0), 1.0), gamma)
    return ad.scale_const(_reduce(ad.mul(modulator, ad.log(pt)), reduction), -1.0)


def dice_loss(y: Target, yhat: Tensor) -> Tensor:
    """Smoothed Dice loss, averaged over every (sample, channel) pair.

    Per pair: ``1 - 2 (sum(y*yhat) + 1e-6) / (sum(y) + sum(yhat) + 1e-6)``.
    Taken literally this is -1 when target and prediction are both empty.
    Inputs with fewer than three dimensions are treated as a single pair.
    """
    yd = _target(y, yhat)
    if yhat.data.ndim >= 3:
        axes = tuple(range(2, yhat.data.ndim))
    else:
        axes = None
    yt = Tensor(yd)
    inter = ad.reduce_sum(ad.mul(yt, yhat), axes)
    denom = ad.add(ad.reduce_sum(yt, axes), ad.reduce_sum(yhat, axes))
    if np.any(denom.data == 0):
        logger.info("dice_loss: empty target and prediction in %d pair(s); literal value is -1",
                    int(np.sum(denom.data == 0)))
    ratio = ad.div(ad.add_const(inter, DICE_SMOOTH), ad.add_const(denom, DICE_SMOOTH))
    per_pair = ad.add_const(ad.scale_const(ratio, -2.0), 1.0)
    return ad.reduce_mean(per_pair)


def hybrid_loss(y: Target, yhat: Tensor, params: LossKind = LossKind()) -> Tensor:
    """``w_dice * dice + w_focal * focal(gamma)``, skipping zero-weight terms."""
    terms = []
    if params.w_dice:
        terms.append(ad.scale_const(dice_loss(y, yhat), params.w_dice))
    if params.w_focal:
        fl = focal_loss(y, yhat, params.gamma, params.reduction)
        terms.append(ad.scale_const(fl, params.w_focal))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def compute_loss(params: LossKind, y: Target, yhat: Tensor) -> Tensor:
    if params.kind == "bce":
        return bce_loss(y, yhat, params.reduction)
    if params.kind == "focal":
        return focal_loss(y, yhat, params.gamma, params.reduction)
    if params.kind == "dice":
        return dice_loss(y, yhat)
    return hybrid_loss(y, yhat, params)
