"""
Focal loss, Adam, early stopping and the training loop.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import data
from . import tensor as T
from .autodiff import Tape, Variable
from .errors import DivergenceError, UsageError
from .metrics import ConfusionMatrix, confusion_from_labels
from .model import GroupMixerModel, ModelConfig, build, copy_state, restore_state, save_checkpoint

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    alpha: Optional[Tuple[float, ...]] = None  # None means uniform weights

    def __post_init__(self):
        if self.gamma < 0:
            raise UsageError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))


def balanced_alpha(counts: Sequence[int]) -> Tuple[float, ...]:
    """Inverse class-frequency weights normalized to mean 1."""
    if any(c <= 0 for c in counts):
        return tuple(1.0 for _ in counts)
    inv = [1.0 / c for c in counts]
    mean = sum(inv) / len(inv)
    return tuple(w / mean for w in inv)


def focal_loss(logits: Variable, labels, cfg: FocalLossConfig = FocalLossConfig()) -> Variable:
    """Mean over the batch of ``-alpha_t * (1 - p_t)**gamma * log(p_t)``.

    ``p_t`` is the softmax probability of the true class.
    """
    z = logits.value
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise UsageError(f"logits must be (N, classes), got {z.shape}")
    n, k = z.shape
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise UsageError(f"labels must be {n} integers, got {labels.shape} {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    if not np.all(np.isfinite(z)):
        raise UsageError("logits must be finite")
    dt = z.dtype.type
    alpha = np.ones(k, dtype=z.dtype) if cfg.alpha is None else np.asarray(cfg.alpha, dtype=z.dtype)
    if alpha.shape != (k,):
        raise UsageError(f"alpha needs {k} entries, got {alpha.shape[0]}")

    rows = np.arange(n)
    logp = T.log_softmax(z, axis=1)
    probs = np.exp(logp)
    logp_t = logp[rows, labels]
    p_t = probs[rows, labels]
    one_minus = -np.expm1(logp_t)
    a_t = alpha[labels]
    gamma = dt(cfg.gamma)
    modulator = one_minus**gamma
    value = np.asarray((-a_t * modulator * logp_t).mean(), dtype=z.dtype)

    def rule(g):
        if cfg.gamma == 0:
            slope = np.zeros_like(one_minus)
        else:
            safe = np.where(one_minus > 0, one_minus, dt(1))
            slope = np.where(one_minus > 0, gamma * safe ** (gamma - 1) * p_t * logp_t, dt(0))
        coef = a_t * (slope - modulator)
        onehot = np.zeros_like(z)
        onehot[rows, labels] = 1
        dz = coef[:, None] * (onehot - probs) * (g / dt(n))
        return (dz,)

    return ad.record("focal_loss", value, (logits,), rule)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Variable], state: AdamState) -> None:
    """One in-place Adam update of every parameter from its ``grad``."""
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise UsageError("parameter list changed between optimizer steps")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Tracks the best validation loss and signals when patience runs out.

    ``update`` returns True once ``epochs_since_improvement`` reaches
    ``patience`` (with patience 0, on the first epoch that does not improve).
    The best model state is kept in memory and, if ``checkpoint_path`` is set,
    written to disk on every improvement.
    """

    def __init__(self, patience: int = 10, checkpoint_path=None):
        if patience < 0:
            raise UsageError(f"patience must be >= 0, got {patience}")
        self.patience = patience
        self.best_val_loss = math.inf
        self.best_epoch: Optional[int] = None
        self.epochs_since_improvement = 0
        self.best_checkpoint = Path(checkpoint_path) if checkpoint_path else None
        self.best_state: Optional[dict] = None

    def update(self, val_loss: float, model: GroupMixerModel, epoch: int) -> bool:
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            self.best_state = copy_state(model)
            if self.best_checkpoint is not None:
                save_checkpoint(model, self.best_checkpoint)
            return False
        self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainHyper:
    lr: float = 4e-3
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    focal_gamma: float = 2.0
    class_weighting: str = "balanced"  # or "uniform"
    augment: bool = True
    eval_batch_size: int = 64
    # stop as soon as eval-mode training accuracy reaches this value
    target_train_accuracy: Optional[float] = None
    track_train_accuracy: bool = False
    checkpoint_path: Optional[str] = None


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    train_acc: Optional[float] = None


@dataclass
class EvalResult:
    loss: float
    confusion: ConfusionMatrix
    predictions: np.ndarray
    probabilities: np.ndarray

    @property
    def accuracy(self) -> float:
        cm = self.confusion
        return (cm.tp + cm.tn) / cm.total if cm.total else float("nan")


def evaluate(model: GroupMixerModel, dataset, loss_cfg: FocalLossConfig = FocalLossConfig(),
             batch_size: int = 64) -> EvalResult:
    """Eval-mode pass over ``dataset``; never augments."""
    was_training = model.training
    model.eval()
    try:
        total, preds, probs = 0.0, [], []
        for start in range(0, len(dataset), batch_size):
            batch = dataset.batch(range(start, min(start + batch_size, len(dataset))))
            logits = model(Variable(batch.images))
            total += float(focal_loss(logits, batch.labels, loss_cfg).value) * len(batch)
            p = T.softmax(logits.value, axis=1)
            probs.append(p)
            preds.append(p.argmax(axis=1))
    finally:
        model.train(was_training)
    predictions = np.concatenate(preds)
    return EvalResult(
        loss=total / len(dataset),
        confusion=confusion_from_labels(predictions, dataset.labels),
        predictions=predictions,
        probabilities=np.concatenate(probs),
    )


def train_model(
    config: ModelConfig,
    train_set,
    val_set,
    hyper: TrainHyper = TrainHyper(),
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> Tuple[GroupMixerModel, List[EpochLog]]:
    """Train with focal loss and Adam, stopping early on validation loss.

    Returns the model restored to its best-validation state, and the per-epoch log.
    Deterministic for a given ``hyper.seed``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise UsageError("training and validation sets must be non-empty")
    init_seq, data_seq = np.random.SeedSequence(hyper.seed).spawn(2)
    model = build(config, np.random.Generator(np.random.PCG64(init_seq)))
    rng = np.random.Generator(np.random.PCG64(data_seq))

    if hyper.class_weighting == "balanced":
        counts = np.bincount(train_set.labels, minlength=config.num_classes)
        alpha = balanced_alpha(counts.tolist())
    elif hyper.class_weighting == "uniform":
        alpha = None
    else:
        raise UsageError(f"unknown class weighting {hyper.class_weighting!r}")
    loss_cfg = FocalLossConfig(hyper.focal_gamma, alpha)

    params = model.parameters()
    opt = AdamState(lr=hyper.lr)
    stopper = EarlyStopper(hyper.patience, hyper.checkpoint_path)
    history: List[EpochLog] = []

    for epoch in range(1, hyper.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        running, seen = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            batch = train_set.batch(order[start : start + hyper.batch_size])
            if hyper.augment:
                batch = data.augment(batch, rng)
            with Tape():
                logits = model(Variable(batch.images))
                if not np.all(np.isfinite(logits.value)):
                    raise DivergenceError(
                        f"non-finite logits at epoch {epoch}", checkpoint=stopper.best_checkpoint
                    )
                loss = focal_loss(logits, batch.labels, loss_cfg)
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}", checkpoint=stopper.best_checkpoint
                )
            ad.backward(loss)
            adam_step(params, opt)
            model.zero_grad()
            running += value * len(batch)
            seen += len(batch)

        val = evaluate(model, val_set, loss_cfg, hyper.eval_batch_size)
        entry = EpochLog(epoch, running / seen, val.loss, val.accuracy)
        if hyper.track_train_accuracy or hyper.target_train_accuracy is not None:
            entry.train_acc = evaluate(model, train_set, loss_cfg, hyper.eval_batch_size).accuracy
        history.append(entry)
        log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.4f",
                 epoch, entry.train_loss, entry.val_loss, entry.val_acc)
        if on_epoch is not None:
            on_epoch(entry)
        if not math.isfinite(val.loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}",
                                  checkpoint=stopper.best_checkpoint)

        stop = stopper.update(val.loss, model, epoch)
        if hyper.target_train_accuracy is not None and entry.train_acc >= hyper.target_train_accuracy:
            break
        if stop:
            break

    if stopper.best_state is not None:
        restore_state(model, stopper.best_state)
    model.eval()
    return model, history


def write_training_log(history: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for e in history:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_acc)])
