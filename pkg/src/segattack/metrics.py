"""Evaluation: binarisation, Dice similarity, attack success and diff maps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

# diff_map categories
TN, TP, FP, FN = 0, 1, 2, 3
CATEGORY_NAMES = {TN: "TN", TP: "TP", FP: "FP", FN: "FN"}
# TP green, FP blue, FN red, TN black background
DIFF_COLORS = np.array([[0, 0, 0], [0, 200, 0], [0, 80, 255], [230, 0, 0]], dtype=np.uint8)

TABLE_LOSSES = ("bce", "focal+dice", "focal")


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold`` (ties go to 1), else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _check_binary(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")
    for a in arrays:
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("masks must be binary (values in {0, 1})")


def _pairs(a: np.ndarray) -> np.ndarray:
    """View a mask as (pairs, pixels); leading axes beyond the last two index pairs."""
    if a.ndim < 2:
        return a.reshape(1, -1)
    return a.reshape(-1, a.shape[-2] * a.shape[-1])


def dsc_pairs(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-(sample, channel) DSC; NaN where both masks are empty."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_binary(pred, truth)
    p = _pairs(pred).astype(np.int64)
    t = _pairs(truth).astype(np.int64)
    inter = (p & t).sum(axis=1)
    total = p.sum(axis=1) + t.sum(axis=1)
    out = np.full(len(total), np.nan)
    live = total > 0
    out[live] = 2.0 * inter[live] / total[live]
    return out


def dsc(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice similarity ``2|y n yhat| / (|y| + |yhat|)``.

    Computed per channel and per sample (the last two axes are the image)
    and averaged, skipping pairs where both masks are empty. If every
    pair is empty the masks agree trivially and 1.0 is returned.
    """
    scores = dsc_pairs(pred, truth)
    live = scores[~np.isnan(scores)]
    return float(live.mean()) if live.size else 1.0


def attack_success(dsc_before: float, dsc_after: float) -> float:
    """Relative DSC drop ``(before - after) / before``, floored at 0."""
    if not dsc_before > 0:
        raise ValueError(f"attack success is undefined for dsc_before={dsc_before} (must be > 0)")
    return max(0.0, (dsc_before - dsc_after) / dsc_before)


def diff_map(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-pixel category codes: TN=0, TP=1, FP=2, FN=3."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_binary(pred, truth)
    p = pred.astype(bool)
    t = truth.astype(bool)
    out = np.full(p.shape, TN, dtype=np.uint8)
    out[p & t] = TP
    out[p & ~t] = FP
    out[~p & t] = FN
    return out


def diff_counts(cats: np.ndarray) -> Dict[str, int]:
    return {name: int(np.sum(cats == code)) for code, name in CATEGORY_NAMES.items()}


def dsc_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def render_diff_map(cats: np.ndarray) -> np.ndarray:
    """RGB uint8 image for a 2-D category map (TP green, FP blue, FN red)."""
    return DIFF_COLORS[np.asarray(cats)]


@dataclass
class EvalRow:
    """One row of the clean-vs-attacked comparison table."""

    model_name: str
    parameter_count: int
    dsc_clean: float
    dsc_attacked: Dict[str, float] = field(default_factory=dict)
    attack_success: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.attack_success and self.dsc_attacked:
            self.attack_success = {
                loss: attack_success(self.dsc_clean, after) for loss, after in self.dsc_attacked.items()
            }

    def consistent(self, tol: float = 1e-9) -> bool:
        return all(
            math.isclose(self.attack_success[k], attack_success(self.dsc_clean, v), abs_tol=tol)
            for k, v in self.dsc_attacked.items()
        )

    def best_attack(self) -> str:
        """Attack loss with the highest success (first listed wins ties)."""
        return max(self.attack_success, key=lambda k: self.attack_success[k])

    def csv_header(self, losses: Sequence[str] = TABLE_LOSSES) -> List[str]:
        return ["model", "parameters", "normal"] + list(losses)

    def csv_row(self, losses: Sequence[str] = TABLE_LOSSES) -> List[str]:
        return [self.model_name, str(self.parameter_count), f"{self.dsc_clean:.4f}"] + [
            f"{self.dsc_attacked[k]:.4f}" for k in losses
        ]
