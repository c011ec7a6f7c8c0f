"""Full-softmax BCE training with Adam, early stopping and all-item ranking metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetSplit
from .models import SequenceRecommender
from .optim import Adam
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    l2: float = 0.0
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    eval_ks: list[int] = field(default_factory=lambda: [10, 20])
    seed: int = 0
    sliding_window: bool = False
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if list(self.eval_ks) != sorted(self.eval_ks) or not self.eval_ks:
            raise ValueError("eval_ks must be a non-empty ascending list")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    @property
    def selection_key(self) -> str:
        k = 10 if 10 in self.eval_ks else self.eval_ks[0]
        return f"ndcg@{k}"


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    user_count: int
    epoch_losses: list[float] = field(default_factory=list)

    def as_flat(self) -> dict[str, float]:
        out = {f"hr@{k}": v for k, v in self.hr.items()}
        out.update({f"ndcg@{k}": v for k, v in self.ndcg.items()})
        return out

    def to_dict(self) -> dict:
        return {"hr": {str(k): v for k, v in self.hr.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()},
                "user_count": self.user_count, "epoch_losses": list(self.epoch_losses)}


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, cause: str):
        super().__init__(f"non-finite values at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def bce_loss(probs: Tensor, targets) -> Tensor:
    """Binary cross-entropy of softmax outputs against one-hot labels, mean over the batch.

    ``probs`` is (batch, |I|) or (|I|,); ``targets`` the true item index per row.
    """
    if probs.ndim == 1:
        probs = T.reshape(probs, (1, -1))
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    batch, n_items = probs.shape
    onehot = np.zeros((batch, n_items))
    onehot[np.arange(batch), targets] = 1.0
    clipped = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = onehot * T.log(clipped) + (1.0 - onehot) * T.log(1.0 - clipped)
    return T.scale(T.sum(ll), -1.0 / batch)


def l2_penalty(model: SequenceRecommender) -> Tensor:
    terms = [T.sum(model.params[n] * model.params[n]) for n in model.decay_names()]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rank_of(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target among all items; ties go to the lower item index."""
    scores = np.atleast_2d(scores)
    rows = np.arange(scores.shape[0])
    t_scores = scores[rows, targets][:, None]
    higher = (scores > t_scores).sum(axis=1)
    idx = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == t_scores) & (idx < targets[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def metrics_from_ranks(ranks: Sequence[int], ks: Sequence[int]) -> tuple[dict[int, float], dict[int, float]]:
    ranks = np.asarray(ranks, dtype=np.float64)
    hr, ndcg = {}, {}
    for k in ks:
        hit = ranks <= k
        hr[k] = float(hit.mean()) if ranks.size else 0.0
        ndcg[k] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean()) if ranks.size else 0.0
    return hr, ndcg


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------

def context_before(history, cutoff: int, target_behavior: int, target_items) -> dict:
    """One user's sequences as seen just before ``cutoff``.

    Auxiliary behaviors keep only events strictly earlier than the cutoff;
    the target sequence is supplied by the caller.
    """
    ctx = {}
    for b, seq in history.sequences.items():
        if b == target_behavior:
            ctx[b] = list(target_items)
        else:
            ctx[b] = [item for item, ts in zip(seq, history.timestamps[b]) if ts < cutoff]
    return ctx


def training_examples(split: DatasetSplit, sliding_window: bool = False) -> tuple[list[dict], np.ndarray]:
    """(context, label) pairs from the training portion.

    Default: one example per user, the last training target item as label.
    With ``sliding_window`` every target prefix of length >= 1 yields an
    example.  Contexts only hold events that happened before the label.
    """
    tb = split.target_behavior
    contexts, labels = [], []
    for h in split.train:
        target = h.sequences[tb]
        starts = range(1, len(target)) if sliding_window else [len(target) - 1]
        for j in starts:
            if j < 1:
                continue
            contexts.append(context_before(h, h.timestamps[tb][j], tb, target[:j]))
            labels.append(target[j])
    return contexts, np.asarray(labels, dtype=np.int64)


def eval_contexts(split: DatasetSplit, which: str) -> tuple[list[dict], np.ndarray]:
    """Validation ranks with the training target history; test adds the validation item.

    Auxiliary events are cut at the held-out item's timestamp.
    """
    tb = split.target_behavior
    if which == "validation":
        ctxs = [context_before(h, int(t), tb, h.sequences[tb])
                for h, t in zip(split.train, split.validation_times)]
        return ctxs, split.validation_items
    if which == "test":
        ctxs = [context_before(h, int(t), tb, list(h.sequences[tb]) + [int(v)])
                for h, t, v in zip(split.train, split.test_times, split.validation_items)]
        return ctxs, split.test_items
    raise ValueError(f"unknown evaluation portion {which!r}")


def evaluate(model: SequenceRecommender, split: DatasetSplit, eval_ks: Sequence[int] = (10, 20),
             which: str = "test", batch_size: int = 512) -> MetricsReport:
    """Rank the held-out item against every item for every user."""
    contexts, targets = eval_contexts(split, which)
    ranks = []
    with T.no_grad():
        for start in range(0, len(contexts), batch_size):
            batch = model.make_batch(contexts[start:start + batch_size])
            out = model.forward(batch)
            ranks.append(rank_of(out.logits.data, targets[start:start + batch_size]))
    ranks = np.concatenate(ranks) if ranks else np.zeros(0)
    hr, ndcg = metrics_from_ranks(ranks, eval_ks)
    return MetricsReport(hr, ndcg, len(contexts))


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopping:
    patience: int = 10
    best_metric: float = -math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0
    best_checkpoint: dict | None = None

    def update(self, epoch: int, metric: float, snapshot: Callable[[], dict] | dict | None = None) -> bool:
        """Record one epoch's validation metric; returns True when training should stop."""
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            self.best_checkpoint = snapshot() if callable(snapshot) else snapshot
        else:
            self.epochs_since_improve += 1
        return self.epochs_since_improve >= self.patience


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    stopped_epoch: int
    epoch_losses: list[float]
    history: list[dict]
    validation: MetricsReport

    def to_dict(self) -> dict:
        return {"best_epoch": self.best_epoch, "stopped_epoch": self.stopped_epoch,
                "epoch_losses": self.epoch_losses, "history": self.history,
                "validation": self.validation.to_dict()}


def train_step(model: SequenceRecommender, opt: Adam, contexts, labels, l2: float,
               rng: np.random.Generator) -> float:
    batch = model.make_batch(contexts)
    out = model.forward(batch, training=True, rng=rng)
    loss = bce_loss(out.probs, labels)
    total = loss if l2 == 0.0 else loss + T.scale(l2_penalty(model), l2)
    opt.zero_grad()
    T.backward(total, model.params.values())
    opt.step()
    return loss.item()


def train(model: SequenceRecommender, split: DatasetSplit, config: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch training with per-epoch validation and patience-based early stopping.

    The model is left holding the best-validation parameters.
    """
    rng = np.random.default_rng(config.seed)
    contexts, labels = training_examples(split, config.sliding_window)
    if not contexts:
        raise ValueError("train: no training examples")
    opt = Adam(model.params, lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    key = config.selection_key
    losses: list[float] = []
    history: list[dict] = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(contexts))
        batch_losses, sizes = [], []
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            sel = order[start:start + config.batch_size]
            try:
                value = train_step(model, opt, [contexts[i] for i in sel], labels[sel], config.l2, rng)
            except NonFiniteError as err:
                raise TrainingDiverged(epoch, bi, str(err)) from err
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, bi, "loss")
            batch_losses.append(value)
            sizes.append(len(sel))
        epoch_loss = float(np.average(batch_losses, weights=sizes))
        losses.append(epoch_loss)
        val = evaluate(model, split, config.eval_ks, "validation", config.eval_batch_size)
        record = {"epoch": epoch, "loss": epoch_loss, **{f"val_{k}": v for k, v in val.as_flat().items()}}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d loss %.5f %s %.4f", epoch, epoch_loss, key, val.as_flat()[key])
        if stopper.update(epoch, val.as_flat()[key], model.state_dict):
            break
    model.load_state_dict(stopper.best_checkpoint)
    best = evaluate(model, split, config.eval_ks, "validation", config.eval_batch_size)
    best.epoch_losses = losses
    return TrainResult(stopper.best_checkpoint, stopper.best_epoch, epoch, losses, history, best)
