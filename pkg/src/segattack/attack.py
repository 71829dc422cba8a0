"""Fast Gradient Sign Method attacks against segmentation models.

``adv = clip(x + eps * sign(grad_x J(theta, x, y)), lo, hi)`` with the attack
loss ``J`` chosen independently of the loss the model was trained with.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .losses import LossKind
from .metrics import attack_success, binarize, dsc
from .models import Model

DEFAULT_EPSILON = 0.009
SWEEP_EPSILONS = (0.0, 0.005, 0.009, 0.015)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    attack_loss: LossKind = LossKind(kind="bce")
    clamp: Tuple[float, float] = (0.0, 1.0)
    epsilons: Tuple[float, ...] = ()
    batch_size: int = 16

    def __post_init__(self):
        lo, hi = self.clamp
        if not lo < hi:
            raise ValueError(f"invalid clamp range {self.clamp}")
        for eps in (self.epsilon,) + tuple(self.epsilons):
            if not 0 <= eps < hi - lo:
                raise ValueError(f"epsilon {eps} must lie in [0, {hi - lo})")
        if list(self.epsilons) != sorted(self.epsilons):
            raise ValueError(f"epsilons must be ascending, got {self.epsilons}")


def input_gradient(model: Model, loss: LossKind, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``grad_x J(theta, x, y)``; parameters are held constant."""
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("attack target mask must be binary")
    expected = (x.shape[0], model.config.out_classes) + x.shape[2:]
    if y.shape != expected:
        raise ad.ShapeError(f"target mask shape {y.shape} does not match expected {expected}")
    xt = ad.Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    out = model.apply(model.parameter_tensors(requires_grad=False), xt)
    value = loss(y, out)
    return ad.backward(value)[xt]


def fgsm(model: Model, cfg: AttackConfig, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Single-step untargeted FGSM against the ground-truth mask ``y``.

    Pixels with zero gradient are left unchanged (``sign(0) = 0``).
    """
    x = np.asarray(x, dtype=model.dtype)
    if cfg.epsilon == 0:
        return x.copy()
    g = input_gradient(model, cfg.attack_loss, x, y)
    lo, hi = cfg.clamp
    return np.clip(x + cfg.epsilon * np.sign(g), lo, hi).astype(x.dtype, copy=False)


@dataclass
class AttackRecord:
    sample_id: str
    dsc_clean: float
    dsc_attacked: float
    adv: np.ndarray = field(repr=False)
    pred_clean: np.ndarray = field(repr=False)
    pred_attacked: np.ndarray = field(repr=False)


@dataclass
class AttackSummary:
    epsilon: float
    loss: str
    records: List[AttackRecord]

    @property
    def mean_dsc_clean(self) -> float:
        return float(np.mean([r.dsc_clean for r in self.records]))

    @property
    def mean_dsc_attacked(self) -> float:
        return float(np.mean([r.dsc_attacked for r in self.records]))

    @property
    def attack_success(self) -> float:
        return attack_success(self.mean_dsc_clean, self.mean_dsc_attacked)


def attack_batch(model: Model, cfg: AttackConfig, dataset: Dataset) -> AttackSummary:
    """Attack every sample; score clean and adversarial predictions by DSC."""
    if not len(dataset):
        raise ValueError("cannot attack an empty dataset")
    images = dataset.images(model.dtype)
    masks = dataset.masks()
    records = []
    bs = cfg.batch_size
    for start in range(0, len(dataset), bs):
        x = images[start : start + bs]
        y = masks[start : start + bs]
        adv = fgsm(model, cfg, x, y)
        clean_pred = binarize(model.forward(x).data)
        adv_pred = clean_pred if cfg.epsilon == 0 else binarize(model.forward(adv).data)
        for k in range(len(x)):
            records.append(
                AttackRecord(
                    dataset[start + k].id,
                    dsc(clean_pred[k], y[k]),
                    dsc(adv_pred[k], y[k]),
                    adv[k],
                    clean_pred[k],
                    adv_pred[k],
                )
            )
    return AttackSummary(cfg.epsilon, cfg.attack_loss.selector, records)


@dataclass
class SweepRow:
    epsilon: float
    mean_dsc: float
    attack_success: float


def epsilon_sweep(
    model: Model, cfg: AttackConfig, dataset: Dataset, epsilons: Optional[Sequence[float]] = None
) -> Tuple[List[SweepRow], List[AttackSummary]]:
    """One :func:`attack_batch` per epsilon; AS is relative to the clean DSC."""
    eps_list = tuple(epsilons if epsilons is not None else (cfg.epsilons or SWEEP_EPSILONS))
    if list(eps_list) != sorted(eps_list):
        raise ValueError(f"epsilons must be ascending, got {eps_list}")
    rows, summaries = [], []
    for eps in eps_list:
        summary = attack_batch(model, _with_epsilon(cfg, eps), dataset)
        rows.append(SweepRow(eps, summary.mean_dsc_attacked, summary.attack_success))
        summaries.append(summary)
    return rows, summaries


def _with_epsilon(cfg: AttackConfig, eps: float) -> AttackConfig:
    return AttackConfig(eps, cfg.attack_loss, cfg.clamp, cfg.epsilons, cfg.batch_size)
