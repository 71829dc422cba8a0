"""AdamW training with a cosine-annealed learning rate and early stopping."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .data import AugmentConfig, Dataset, augment
from .losses import LossKind
from .metrics import binarize, dsc
from .models import Model

logger = logging.getLogger(__name__)

BETA1, BETA2, EPS_ADAM = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr_max: float = 3e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-3
    max_iterations: Optional[int] = None  # cosine period; None = epochs * batches per epoch
    patience: int = 3
    loss: LossKind = LossKind()
    augment: AugmentConfig = AugmentConfig()
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.lr_min < self.lr_max:
            raise ValueError(f"need 0 <= lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")

    def period(self, n_train: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return self.epochs * math.ceil(n_train / self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.selector
        return d


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite training loss {value} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


def cosine_lr(step: int, cfg: TrainConfig, period: Optional[int] = None) -> float:
    """Half-cosine from ``lr_max`` at step 0 down to ``lr_min`` at step T, then flat."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    t_max = period if period is not None else cfg.max_iterations
    if t_max is None:
        raise ValueError("cosine_lr needs a period: set cfg.max_iterations or pass period")
    frac = min(step, t_max) / t_max
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    wd: float,
) -> Dict[str, np.ndarray]:
    """One AdamW update with decoupled weight decay. Returns new parameter arrays
    and advances ``state`` in place."""
    state.t += 1
    t = state.t
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m[name] = BETA1 * state.m[name] + (1 - BETA1) * g
        v = state.v[name] = BETA2 * state.v[name] + (1 - BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + EPS_ADAM)
        out[name] = (p * (1.0 - lr * wd) - lr * update).astype(p.dtype, copy=False)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dsc: float
    lr: float


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_dsc(self) -> float:
        return self.records[self.best_epoch].val_dsc if self.records else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_dsc", "lr"])
        for r in self.records:
            w.writerow([r.epoch, f"{r.train_loss:.10g}", f"{r.val_dsc:.10g}", f"{r.lr:.10g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "History":
        rows = list(csv.DictReader(io.StringIO(text)))
        recs = [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_dsc"]), float(r["lr"])) for r in rows]
        best = int(np.argmax([r.val_dsc for r in recs])) if recs else -1
        return cls(recs, best)


def evaluate_dsc(model: Model, dataset: Dataset, batch_size: int = 16, threshold: float = 0.5) -> float:
    """Mean per-sample DSC of thresholded predictions."""
    probs = model.predict(dataset.images(model.dtype), batch_size)
    preds = binarize(probs, threshold)
    masks = dataset.masks()
    return float(np.mean([dsc(p, m) for p, m in zip(preds, masks)]))


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray, loss: LossKind) -> Tuple[float, Dict[str, np.ndarray]]:
    params = model.parameter_tensors(requires_grad=True)
    out = model.apply(params, ad.Tensor(x))
    value = loss(y, out)
    leaves = ad.backward(value)
    return float(value.data), {name: leaves[t] for name, t in params.items() if t in leaves}


def train(
    model: Model,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
    evaluate: Callable[[Model, Dataset], float] = evaluate_dsc,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[Model, History]:
    """Train ``model`` and return the best-validation-DSC copy with its history.

    The input model is not modified. Batches are drawn by a seeded
    shuffle; only training batches are augmented.
    """
    if not len(train_set) or not len(val_set):
        raise ValueError("train and validation sets must be nonempty")
    dtype = np.dtype(cfg.dtype)
    current = model.astype(dtype)
    current.check_input((1,) + train_set[0].image.shape)
    images = train_set.images(dtype)
    masks = train_set.masks()
    n = len(train_set)
    period = cfg.period(n)
    rng = np.random.default_rng(cfg.seed)
    state = OptimState.zeros_like(current.parameters)
    history = History()
    best: Optional[Model] = None
    best_dsc = -np.inf
    stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        lr_start = cosine_lr(step, cfg, period)
        order = rng.permutation(n)
        losses = []
        for b in range(0, n, cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            xb = np.empty((len(idx),) + images.shape[1:], dtype=dtype)
            yb = np.empty((len(idx),) + masks.shape[1:], dtype=dtype)
            for k, i in enumerate(idx):
                xi, yi = augment(images[i], masks[i], cfg.augment, rng)
                xb[k], yb[k] = xi, yi
            value, grads = loss_and_grads(current, xb, yb, cfg.loss)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, step, value)
            lr = cosine_lr(step, cfg, period)
            current.parameters = adamw_step(current.parameters, grads, state, lr, cfg.weight_decay)
            losses.append(value)
            step += 1
        val = float(evaluate(current, val_set))
        rec = EpochRecord(epoch, float(np.mean(losses)), val, lr_start)
        history.records.append(rec)
        logger.info("epoch %d loss %.4f val_dsc %.4f lr %.2e", epoch, rec.train_loss, val, lr_start)
        if on_epoch:
            on_epoch(rec)
        if val > best_dsc:
            best_dsc = val
            best = current.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                history.stopped_early = epoch < cfg.epochs - 1
                break
    return best, history
