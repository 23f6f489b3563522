"""Losses, class weighting, optimiser, schedule and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Dataset, balanced_batches, collate_batch, shuffled_batches
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .metrics import macro_f1
from .model import CrossModalModel, clone_model
from .numerics import Node

log = logging.getLogger(__name__)

DESIGN_WCE = "wce"
DESIGN_WCE_SML = "wce-sml-balanced"
DESIGNS = (DESIGN_WCE, DESIGN_WCE_SML)


@dataclass(frozen=True)
class ClassWeights:
    """Inverse-frequency class weights ``w_j = N / N_j``.

    ``exact`` holds the weights as rationals; ``weights`` is the correctly
    rounded double of each.
    """

    weights: np.ndarray
    counts: tuple[int, ...]
    total: int
    exact: tuple[Fraction, ...]

    def __len__(self) -> int:
        return len(self.counts)


def class_weights(counts: Sequence[int]) -> ClassWeights:
    counts = tuple(int(c) for c in counts)
    if not counts:
        raise ValueError("no classes")
    for j, c in enumerate(counts):
        if c <= 0:
            raise ValueError(f"class {j} has count {c}; every class must occur in the training set")
    total = int(np.sum(counts, dtype=object))
    exact = tuple(Fraction(total, c) for c in counts)
    # int / int in Python is correctly rounded, so this matches float(Fraction)
    weights = np.array([total / c for c in counts], dtype=np.float64)
    return ClassWeights(weights, counts, total, exact)


def uniform_weights(n_classes: int) -> ClassWeights:
    return ClassWeights(np.ones(n_classes), (1,) * n_classes, n_classes, (Fraction(1),) * n_classes)


def expressiveness_targets(labels: np.ndarray, neutral_class: int) -> np.ndarray:
    """``+1`` for expressive (non-neutral) samples, ``-1`` for neutral ones."""
    return np.where(np.asarray(labels) == neutral_class, -1.0, 1.0)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels


def wce_loss(logits, labels, weights: ClassWeights | np.ndarray | None = None) -> Node:
    """Batch mean of ``w_label · (−log softmax(logits)[label])``."""
    logits = nx.constant(logits)
    batch, n_classes = logits.shape
    labels = _check_labels(labels, n_classes)
    if labels.size != batch:
        raise ShapeError(f"{labels.size} labels for {batch} logit rows")
    w = np.ones(n_classes) if weights is None else np.asarray(getattr(weights, "weights", weights))
    if w.shape != (n_classes,):
        raise ShapeError(f"{w.shape[0]} class weights for {n_classes} classes")
    picked = np.zeros((batch, n_classes))
    picked[np.arange(batch), labels] = w[labels]
    return nx.mul(nx.sum(nx.mul(nx.log_softmax(logits), picked)), -1.0 / batch)


def soft_margin_loss(x, y) -> Node:
    """``mean(log(1 + exp(−y·x)))``, stable for large ``|x|``."""
    x = nx.constant(x)
    y = np.asarray(y, dtype=np.float64)
    if x.value.size != y.size:
        raise ShapeError(f"soft margin: {x.value.size} scores vs {y.size} targets")
    flat = nx.reshape(x, (y.size,))
    return nx.mean(nx.softplus(nx.mul(flat, -y.reshape(-1))))


def total_loss(logits, aux, labels, weights, targets, sml_weight: float) -> Node:
    main = wce_loss(logits, labels, weights)
    if sml_weight == 0:
        return main
    return nx.add(main, nx.mul(soft_margin_loss(aux, targets), float(sml_weight)))


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    def __init__(self, params: Sequence[Node], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: Sequence[Node], max_norm: float) -> float:
    norm = math.sqrt(float(np.sum([np.sum(p.grad * p.grad) for p in params])))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


@dataclass
class TrainConfig:
    design: str = DESIGN_WCE
    lr: float = 1e-4
    lr_min: float = 0.0
    epochs: int = 25
    batch_size: int = 64
    sml_weight: float = 1.0
    weighted: bool = True
    neutral_class: int = 5
    max_grad_norm: float | None = None
    max_frames: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}; choose from {DESIGNS}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if self.sml_weight < 0:
            raise ConfigError("sml_weight must be >= 0")

    @property
    def effective_sml_weight(self) -> float:
        return self.sml_weight if self.design == DESIGN_WCE_SML else 0.0


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_macro_f1: float
    lr: float

    def to_tsv(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.dev_macro_f1:.6f}\t{self.lr:.6g}"


@dataclass
class TrainResult:
    model: CrossModalModel
    best_model: CrossModalModel
    best_epoch: int
    history: list[EpochLog] = field(default_factory=list)

    def log_tsv(self) -> str:
        lines = ["epoch\tmean_train_loss\tdev_macro_f1\tlr"]
        lines += [entry.to_tsv() for entry in self.history]
        return "\n".join(lines) + "\n"


def predict_logits(model: CrossModalModel, dataset: Dataset, batch_size: int = 256,
                   max_frames: int | None = None) -> np.ndarray:
    rows = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        batch = collate_batch(dataset, idx, max_frames)
        rows.append(model(batch).logits.value)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, model.config.n_classes))


def epoch_plan(dataset: Dataset, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    seed = np.random.SeedSequence([cfg.seed, epoch])
    if cfg.design == DESIGN_WCE_SML:
        neutral = dataset.labels == cfg.neutral_class
        plan = balanced_batches(np.arange(len(dataset)), neutral, cfg.batch_size, seed)
    else:
        plan = shuffled_batches(len(dataset), cfg.batch_size, seed)
    return [np.asarray(b) for b in plan]


def steps_per_epoch(dataset: Dataset, cfg: TrainConfig) -> int:
    return len(epoch_plan(dataset, cfg, 0))


def train(model: CrossModalModel, train_set: Dataset, cfg: TrainConfig,
          dev_set: Dataset | None = None) -> TrainResult:
    """Train ``model`` in place; returns the final and best-dev snapshots plus the epoch log."""
    n_classes = model.config.n_classes
    if cfg.weighted:
        weights = class_weights(np.bincount(train_set.labels, minlength=n_classes))
    else:
        weights = uniform_weights(n_classes)
    sml_weight = cfg.effective_sml_weight
    params = model.parameter_nodes()
    opt = Adam(params)
    total_steps = cfg.epochs * steps_per_epoch(train_set, cfg) if cfg.epochs else 0
    step = 0
    history: list[EpochLog] = []
    best_model, best_epoch, best_f1 = clone_model(model), 0, -1.0
    lr = cfg.lr

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch_no, idx in enumerate(epoch_plan(train_set, cfg, epoch)):
            batch = collate_batch(train_set, idx, cfg.max_frames)
            labels = train_set.labels[idx]
            out = model(batch)
            targets = expressiveness_targets(labels, cfg.neutral_class)
            loss = total_loss(out.logits, out.aux, labels, weights, targets, sml_weight)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {batch_no}")
            nx.zero_grad(params)
            nx.backward(loss)
            if cfg.max_grad_norm:
                clip_grad_norm(params, cfg.max_grad_norm)
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
            opt.step(lr)
            step += 1
            losses.append(value)
        dev_f1 = float("nan")
        if dev_set is not None and len(dev_set):
            pred = predict_logits(model, dev_set, max_frames=cfg.max_frames).argmax(axis=1)
            dev_f1 = macro_f1(dev_set.labels, pred, n_classes)
            if dev_f1 > best_f1:
                best_model, best_epoch, best_f1 = clone_model(model), epoch, dev_f1
        entry = EpochLog(epoch, float(np.mean(losses)) if losses else float("nan"), dev_f1, lr)
        log.info("epoch %d loss %.4f dev macro-F1 %.4f lr %.3g", epoch, entry.train_loss, dev_f1, lr)
        history.append(entry)

    if dev_set is None or best_epoch == 0:
        best_model, best_epoch = clone_model(model), cfg.epochs
    nx.zero_grad(params)
    return TrainResult(model, best_model, best_epoch, history)
