"""Model-behavior analyses: integrator/behavior ablations, routing drift,
item-importance change under an item swap, and (L, r) sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import DatasetSplit
from .models import INTEGRATORS, DyMuS, DyMuSPlus, ModelConfig, SequenceRecommender, build_model
from .training import MetricsReport, TrainConfig, eval_contexts, evaluate, train

log = logging.getLogger(__name__)

RATE_EPS = 1e-12


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationSpec:
    integrator: str = "dynamic_routing"
    removed_behaviors: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}; expected one of {INTEGRATORS}")
        object.__setattr__(self, "removed_behaviors", frozenset(int(b) for b in self.removed_behaviors))

    def check(self, behavior_count: int) -> None:
        if any(not 0 <= b < behavior_count for b in self.removed_behaviors):
            raise ValueError(f"ablation: removed behavior out of range [0, {behavior_count})")
        if len(self.removed_behaviors) > behavior_count - 1:
            raise ValueError("ablation: cannot remove every behavior")

    def apply(self, config: ModelConfig) -> ModelConfig:
        self.check(config.behavior_count)
        return replace(config, integrator=self.integrator, removed_behaviors=sorted(self.removed_behaviors))

    def to_dict(self, behaviors: Sequence[str] | None = None) -> dict:
        removed = sorted(self.removed_behaviors)
        out = {"integrator": self.integrator, "removed_behaviors": removed}
        if behaviors is not None:
            out["removed_behavior_names"] = [behaviors[b] for b in removed]
        return out


@dataclass
class AblationResult:
    spec: AblationSpec
    validation: MetricsReport
    test: MetricsReport
    best_epoch: int

    def to_dict(self, behaviors: Sequence[str] | None = None) -> dict:
        return {"spec": self.spec.to_dict(behaviors), "best_epoch": self.best_epoch,
                "validation": self.validation.to_dict(), "test": self.test.to_dict()}


def run_ablation(spec: AblationSpec, model_config: ModelConfig, split: DatasetSplit,
                 train_config: TrainConfig) -> AblationResult:
    """Train and evaluate ``model_config`` with the integrator and removals of ``spec``."""
    config = spec.apply(model_config)
    model = build_model(config)
    result = train(model, split, train_config)
    test = evaluate(model, split, train_config.eval_ks, "test", train_config.eval_batch_size)
    test.epoch_losses = result.epoch_losses
    return AblationResult(spec, result.validation, test, result.best_epoch)


# ---------------------------------------------------------------------------
# routing drift
# ---------------------------------------------------------------------------

@dataclass
class DriftRow:
    user: str
    first: dict[str, float]
    last: dict[str, float]
    rates: dict[str, float]

    @property
    def total(self) -> float:
        return float(sum(abs(v) for v in self.rates.values()))


@dataclass
class DriftReport:
    behaviors: list[str]
    iterations: int
    rows: list[DriftRow] = field(default_factory=list)

    def mean_abs_rate(self) -> float:
        return float(np.mean([r.total for r in self.rows])) if self.rows else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["user", "total_change"] + [f"rate_{b}" for b in self.behaviors]
                        + [f"first_{b}" for b in self.behaviors] + [f"last_{b}" for b in self.behaviors])
        for r in self.rows:
            writer.writerow([r.user, repr(r.total)] + [repr(r.rates[b]) for b in self.behaviors]
                            + [repr(r.first[b]) for b in self.behaviors] + [repr(r.last[b]) for b in self.behaviors])
        return buf.getvalue()


def with_iterations(model: SequenceRecommender, iters: int) -> SequenceRecommender:
    """Same parameters, different number of routing iterations."""
    if iters == model.config.routing_iters:
        return model
    clone = build_model(replace(model.config, routing_iters=iters))
    clone.load_state_dict(model.state_dict())
    return clone


def behavior_influence(model: SequenceRecommender, trace, capsule: int = 0) -> np.ndarray:
    """Per-iteration, per-behavior routed contribution to one final capsule.

    Returns (iterations, batch, |B|): the norm of
    alpha * sum_d c[d, capsule] * (behavior b's share of candidate u[d, capsule]).
    """
    p = model.prefix
    alpha = float(model.params[f"{p}.routing.alpha"].data)
    out = []
    for it, coef in enumerate(trace.coefficients):
        c0 = coef[:, :, capsule]                                   # (batch, D)
        if isinstance(model, DyMuSPlus):
            w = model.params[f"{p}.routing.W_d"].data[:, :, capsule, :]   # (D, L, K)
            enc = trace.encodings[it]                              # (batch, K, D, L)
            share = np.einsum("dlk,bkdl->bkdl", w, enc)
        else:
            w = model.params[f"{p}.routing.W_dc"].data[:, capsule]       # (D, L, K)
            enc = trace.encodings[0]                               # (batch, K, D)
            share = np.einsum("dlk,bkd->bkdl", w, enc)
        contrib = alpha * np.einsum("bd,bkdl->bkl", c0, share)
        out.append(np.linalg.norm(contrib, axis=-1))
    return np.stack(out)


def routing_drift(model: SequenceRecommender, contexts: Sequence[dict], users: Sequence[str] | None = None,
                  iters: int | None = None, top_n: int | None = None, capsule: int = 0,
                  batch_size: int = 512) -> DriftReport:
    """Rate of change of each behavior's routed influence between the first and last iteration.

    rate_b = (infl_b(last) - infl_b(first)) / infl_b(first); rows are sorted by
    total absolute rate, ties broken by user id.
    """
    if not isinstance(model, (DyMuS, DyMuSPlus)) or model.config.integrator != "dynamic_routing":
        raise ValueError("routing_drift: needs a capsule model using dynamic routing")
    iters = model.config.routing_iters if iters is None else iters
    if iters < 2:
        raise ValueError("routing_drift: drift needs at least 2 routing iterations")
    users = [str(u) for u in users] if users is not None else [str(i) for i in range(len(contexts))]
    if len(users) != len(contexts):
        raise ValueError("routing_drift: users and contexts differ in length")
    runner = with_iterations(model, iters)
    names = list(model.config.behaviors)
    rows = []
    for start in range(0, len(contexts), batch_size):
        out = runner.predict(contexts[start:start + batch_size])
        infl = behavior_influence(runner, out.trace, capsule)
        first, last = infl[0], infl[-1]
        rate = (last - first) / np.maximum(first, RATE_EPS)
        for i in range(first.shape[0]):
            u = users[start + i]
            rows.append(DriftRow(u, dict(zip(names, map(float, first[i]))), dict(zip(names, map(float, last[i]))),
                                 dict(zip(names, map(float, rate[i])))))
    rows.sort(key=lambda r: (-r.total, r.user))
    if top_n is not None:
        rows = rows[:top_n]
    return DriftReport(names, iters, rows)


# ---------------------------------------------------------------------------
# item importance (DyMuS+)
# ---------------------------------------------------------------------------

@dataclass
class ImportanceRow:
    position: int
    item: int
    before: float
    after: float

    @property
    def rate(self) -> float:
        return (self.after - self.before) / max(abs(self.before), RATE_EPS)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


def target_importance(model: DyMuSPlus, context: dict) -> list[tuple[int, float]]:
    """Cosine of each target-position new gate with the final hidden state, last iteration.

    Returns (position in the target sequence, similarity) for every position
    that fits inside the model's sequence cap.
    """
    tb = model.config.target_behavior
    out = model.predict([context])
    gates = out.trace.new_gates[-1].get(tb)
    seq = list(context.get(tb, ()))
    if gates is None or not seq:
        return []
    hidden = out.trace.encodings[-1][0, tb]
    width = gates.shape[1]
    kept = min(len(seq), width)
    return [(len(seq) - kept + j, _cosine(gates[0, width - kept + j], hidden)) for j in range(kept)]


def item_importance_change(model: DyMuSPlus, context: dict, behavior: int, position: int, new_item: int,
                           last_n: int | None = 5) -> list[ImportanceRow]:
    """Importance of the last ``last_n`` target positions before vs after swapping one item.

    ``position`` indexes the sequence of ``behavior`` (negative values count
    from the end).
    """
    if not isinstance(model, DyMuSPlus):
        raise TypeError("item_importance_change: needs a DyMuS+ model")
    if model.config.routing_iters < 2 or model.config.integrator != "dynamic_routing":
        raise ValueError("item_importance_change: needs dynamic routing with at least 2 iterations")
    seq = list(context.get(behavior, ()))
    if not -len(seq) <= position < len(seq):
        raise IndexError(f"item_importance_change: position {position} out of range for a sequence of {len(seq)}")
    if not 0 <= new_item < model.config.item_count:
        raise IndexError(f"item_importance_change: item {new_item} out of range")
    changed = {b: list(s) for b, s in context.items()}
    changed[behavior][position] = int(new_item)
    before = target_importance(model, context)
    after = dict(target_importance(model, changed))
    if last_n is not None:
        before = before[-last_n:]
    tb = model.config.target_behavior
    return [ImportanceRow(pos, int(changed[tb][pos]), sim, after[pos]) for pos, sim in before]


def importance_csv(rows: Sequence[ImportanceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["position", "item", "before", "after", "rate"])
    for r in rows:
        writer.writerow([r.position, r.item, repr(r.before), repr(r.after), repr(r.rate)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# hyperparameter sweep
# ---------------------------------------------------------------------------

DEFAULT_GRID = {"capsule_len": [2, 4, 8, 16, 32], "routing_iters": [1, 2, 3, 4]}


@dataclass
class SweepCell:
    capsule_len: int
    routing_iters: int
    metrics: dict[str, float]
    best_epoch: int


def _sweep_cell(args) -> SweepCell:
    model_config, split, train_config, length, iters = args
    config = replace(model_config, capsule_len=length, routing_iters=iters)
    model = build_model(config)
    result = train(model, split, train_config)
    return SweepCell(length, iters, result.validation.as_flat(), result.best_epoch)


def hyperparameter_sweep(grid: dict[str, Sequence[int]] | None, model_config: ModelConfig, split: DatasetSplit,
                         train_config: TrainConfig, workers: int = 1) -> list[SweepCell]:
    """Train every (capsule_len, routing_iters) pair with the same seed and budget.

    Cells come back in grid order; ``workers > 1`` runs them in separate processes.
    """
    grid = dict(DEFAULT_GRID if grid is None else grid)
    unknown = set(grid) - set(DEFAULT_GRID)
    if unknown:
        raise ValueError(f"sweep: unknown grid axes {sorted(unknown)}")
    lengths = list(grid.get("capsule_len", [model_config.capsule_len]))
    iters = list(grid.get("routing_iters", [model_config.routing_iters]))
    if not lengths or not iters:
        raise ValueError("sweep: grid must be nonempty")
    jobs = [(model_config, split, train_config, L, r) for L in lengths for r in iters]
    if workers <= 1 or len(jobs) == 1:
        return [_sweep_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_sweep_cell, jobs))


def sweep_csv(cells: Sequence[SweepCell], key: str = "ndcg@10") -> str:
    """Long-form table, one row per cell, ready for a heatmap."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    keys = sorted(cells[0].metrics) if cells else [key]
    writer.writerow(["capsule_len", "routing_iters", "best_epoch"] + keys)
    for c in cells:
        writer.writerow([c.capsule_len, c.routing_iters, c.best_epoch] + [repr(c.metrics[k]) for k in keys])
    return buf.getvalue()


def sweep_table(cells: Sequence[SweepCell], key: str = "ndcg@10") -> dict:
    lengths = sorted({c.capsule_len for c in cells})
    iters = sorted({c.routing_iters for c in cells})
    lookup = {(c.capsule_len, c.routing_iters): c.metrics[key] for c in cells}
    return {"metric": key, "capsule_len": lengths, "routing_iters": iters,
            "values": [[lookup.get((L, r), math.nan) for r in iters] for L in lengths]}


def contexts_for(split: DatasetSplit, which: str = "test") -> tuple[list[dict], np.ndarray]:
    """Evaluation contexts, re-exported for analysis callers."""
    return eval_contexts(split, which)
