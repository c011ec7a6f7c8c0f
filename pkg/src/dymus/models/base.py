"""Shared model plumbing: config, padded batches, parameter registry, routing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..tensor import Tensor

MODEL_KINDS = ("dymus", "dymus_plus", "gru_baseline")
INTEGRATORS = ("dynamic_routing", "sum", "self_attention")


@dataclass
class ModelConfig:
    item_count: int
    behaviors: list[str]
    kind: str = "dymus"
    target_behavior: int = 0
    embed_dim: int = 16
    capsule_len: int = 4
    routing_iters: int = 2
    dropout: float = 0.0
    seq_cap: int = 50
    integrator: str = "dynamic_routing"
    removed_behaviors: list[int] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.behaviors = list(self.behaviors)
        self.removed_behaviors = sorted(set(self.removed_behaviors))
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}; expected one of {INTEGRATORS}")
        if self.routing_iters < 1:
            raise ValueError("routing_iters must be >= 1")
        if self.capsule_len < 1 or self.embed_dim < 1:
            raise ValueError("capsule_len and embed_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.item_count < 1:
            raise ValueError("item_count must be >= 1")
        if not 0 <= self.target_behavior < len(self.behaviors):
            raise ValueError("target_behavior out of range")
        if any(not 0 <= b < len(self.behaviors) for b in self.removed_behaviors):
            raise ValueError("removed_behaviors out of range")
        if len(self.removed_behaviors) >= len(self.behaviors):
            raise ValueError("cannot remove every behavior")

    @property
    def final_capsules(self) -> int:
        return self.embed_dim

    @property
    def behavior_count(self) -> int:
        return len(self.behaviors)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Left-padded per-behavior item index matrices with validity masks."""

    items: list[np.ndarray]
    masks: list[np.ndarray]

    @property
    def size(self) -> int:
        return self.items[0].shape[0]

    @classmethod
    def from_sequences(cls, sequences: Sequence[dict[int, Sequence[int]]], behavior_count: int,
                       seq_cap: int, item_count: int) -> "Batch":
        items, masks = [], []
        for b in range(behavior_count):
            seqs = [list(s.get(b, ()))[-seq_cap:] if seq_cap > 0 else list(s.get(b, ())) for s in sequences]
            width = max((len(s) for s in seqs), default=0)
            idx = np.zeros((len(seqs), width), dtype=np.int64)
            mask = np.zeros((len(seqs), width), dtype=bool)
            for row, s in enumerate(seqs):
                if s:
                    idx[row, width - len(s):] = s
                    mask[row, width - len(s):] = True
            if idx.size and (idx.min() < 0 or idx.max() >= item_count):
                raise IndexError(f"item index out of range [0, {item_count}) in behavior {b}")
            items.append(idx)
            masks.append(mask)
        return cls(items, masks)


@dataclass
class RoutingTrace:
    """Per-iteration record of a forward pass (numpy arrays, batch-major)."""

    logits: list[np.ndarray] = field(default_factory=list)
    coefficients: list[np.ndarray] = field(default_factory=list)
    capsules: list[np.ndarray] = field(default_factory=list)
    representations: list[np.ndarray] = field(default_factory=list)
    predicted: list[np.ndarray] = field(default_factory=list)
    integration: list[np.ndarray] = field(default_factory=list)
    candidates: list[np.ndarray] = field(default_factory=list)
    encodings: list[np.ndarray] = field(default_factory=list)
    new_gates: list[dict[int, np.ndarray]] = field(default_factory=list)
    adjusting: list[dict[int, np.ndarray]] = field(default_factory=list)


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: Tensor
    trace: RoutingTrace


# ---------------------------------------------------------------------------
# routing (shared by both capsule models)
# ---------------------------------------------------------------------------

def routing_phase(u: Tensor, logits: Tensor, alpha: Tensor, w: Tensor, b: Tensor):
    """One pass of coefficient softmax, weighted integration and length summary.

    ``u`` is (batch, D, C, L), ``logits`` (batch, D, C).  Returns coefficients,
    final capsules (batch, C, L) and the representation (batch, C).
    """
    coef = T.softmax(logits, axis=-1)
    capsules = T.einsum("bdc,bdcl->bcl", coef, u) * alpha
    rep = T.l2_norm(capsules, axis=-1) * w + b
    return coef, capsules, rep


def routing_update(u: Tensor, logits: Tensor, capsules: Tensor, rep: Tensor, items: Tensor, w_coef: Tensor):
    """Logit increment from agreement with the integration result.

    Returns predicted item embedding (batch, D), integration result r
    (batch, C, L) and the next logits.
    """
    batch, n_caps, _ = capsules.shape
    dim = items.shape[1]
    weights = T.softmax(rep @ items.T, axis=-1)
    predicted = weights @ items
    tiled = T.broadcast_to(T.reshape(predicted, (batch, 1, dim)), (batch, n_caps, dim))
    joined = T.concat([capsules, tiled], axis=-1)
    result = T.einsum("clm,bcm->bcl", w_coef, joined)
    new_logits = logits + T.einsum("bdcl,bcl->bdc", u, result)
    return predicted, result, new_logits


def route(u: Tensor, params: dict[str, Tensor], prefix: str, items: Tensor, iters: int,
          trace: RoutingTrace | None = None) -> tuple[Tensor, RoutingTrace]:
    """Iterative dynamic routing over fixed candidates; returns the final representation."""
    if iters < 1:
        raise ValueError("route: routing iterations must be >= 1")
    trace = trace if trace is not None else RoutingTrace()
    batch, dim, n_caps, _ = u.shape
    logits = T.constant(np.zeros((batch, dim, n_caps)))
    alpha, w, b = (params[f"{prefix}.routing.{n}"] for n in ("alpha", "w", "b"))
    rep = None
    for it in range(iters):
        coef, capsules, rep = routing_phase(u, logits, alpha, w, b)
        trace.logits.append(logits.data)
        trace.coefficients.append(coef.data)
        trace.capsules.append(capsules.data)
        trace.representations.append(rep.data)
        trace.candidates.append(u.data)
        if it < iters - 1:
            predicted, result, logits = routing_update(u, logits, capsules, rep, items,
                                                       params[f"{prefix}.routing.W_coef"])
            trace.predicted.append(predicted.data)
            trace.integration.append(result.data)
    return rep, trace


def score_items(v: Tensor, item_embeddings: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax over all items of ``v . i``; returns (logits, probabilities)."""
    logits = v @ item_embeddings.T if v.ndim == 2 else T.reshape(T.reshape(v, (1, -1)) @ item_embeddings.T, (-1,))
    return logits, T.softmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# model base
# ---------------------------------------------------------------------------

class SequenceRecommender:
    prefix = "model"

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._no_decay: set[str] = set()
        self.encode_calls = 0
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self._build(rng)

    # parameter registry -----------------------------------------------------
    def _uniform(self, rng, name: str, shape: tuple[int, ...]) -> None:
        bound = 1.0 / math.sqrt(self.config.embed_dim)
        self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)

    def _fill(self, name: str, shape: tuple[int, ...], value: float, decay: bool = False) -> None:
        self.params[name] = Tensor(np.full(shape, value, dtype=float), requires_grad=True, name=name)
        if not decay:
            self._no_decay.add(name)

    def _build(self, rng) -> None:
        raise NotImplementedError

    def decay_names(self) -> list[str]:
        return [n for n in self.params if n not in self._no_decay]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in self.params.items():
            a = np.asarray(arrays[name], dtype=float)
            if a.shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {a.shape} != model shape {p.data.shape}")
            p.data = a.copy()
            p.grad = None

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # inference ----------------------------------------------------------------
    def make_batch(self, sequences: Sequence[dict[int, Sequence[int]]]) -> Batch:
        c = self.config
        return Batch.from_sequences(sequences, c.behavior_count, c.seq_cap, c.item_count)

    def forward(self, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> ForwardOutput:
        raise NotImplementedError

    def predict(self, sequences: Sequence[dict[int, Sequence[int]]]) -> ForwardOutput:
        with T.no_grad():
            return self.forward(self.make_batch(sequences))

    def _drop(self, x: Tensor, training: bool, rng) -> Tensor:
        return T.dropout(x, self.config.dropout, rng, training)

    def _behavior_name(self, b: int) -> str:
        return self.config.behaviors[b]
