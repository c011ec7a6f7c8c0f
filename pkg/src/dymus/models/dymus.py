"""Per-behavior GRU encoders integrated by dynamic routing, and the single-GRU baseline."""
from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .base import Batch, ForwardOutput, ModelConfig, RoutingTrace, SequenceRecommender, route, score_items

GRU_WEIGHTS = ("W_ir", "W_hr", "W_iz", "W_hz", "W_in", "W_hn")
GRU_BIASES = ("b_r", "b_z", "b_n")


def gru_sequence(x: Tensor, mask: np.ndarray, p: dict[str, Tensor]) -> Tensor:
    """Run a GRU over left-padded inputs ``x`` (batch, T, D); returns the last hidden state.

    Padded steps leave the hidden state untouched, so each row ends with the
    state after its own last item (zero for an empty row).
    """
    batch, steps, dim = x.shape
    h = T.constant(np.zeros((batch, dim)))
    if steps == 0:
        return h
    xr = T.einsum("btk,dk->btd", x, p["W_ir"]) + p["b_r"]
    xz = T.einsum("btk,dk->btd", x, p["W_iz"]) + p["b_z"]
    xn = T.einsum("btk,dk->btd", x, p["W_in"]) + p["b_n"]
    hr, hz, hn = p["W_hr"].T, p["W_hz"].T, p["W_hn"].T
    for t in range(steps):
        m = mask[:, t]
        if not m.any():
            continue
        r = T.sigmoid(xr[:, t] + h @ hr)
        z = T.sigmoid(xz[:, t] + h @ hz)
        n = T.tanh(xn[:, t] + r * (h @ hn))
        h_new = z * n + (1.0 - z) * h
        h = h_new if m.all() else T.where(m[:, None], h_new, h)
    return h


def make_candidate_capsules(encoded: Tensor, w_dc: Tensor) -> Tensor:
    """Candidates u[d, c] = W_dc @ [e^1_d .. e^|B|_d].

    ``encoded`` is (batch, |B|, D) or (|B|, D); ``w_dc`` is (D, C, L, |B|).
    Output is (batch, D, C, L) or (D, C, L).
    """
    if encoded.ndim == 2:
        return T.einsum("dclk,kd->dcl", w_dc, encoded)
    return T.einsum("dclk,bkd->bdcl", w_dc, encoded)


class DyMuS(SequenceRecommender):
    prefix = "dymus"

    def _build(self, rng) -> None:
        c = self.config
        D, L, K, C = c.embed_dim, c.capsule_len, c.behavior_count, c.final_capsules
        p = self.prefix
        self._uniform(rng, f"{p}.item_embeddings", (c.item_count, D))
        for name in c.behaviors:
            for w in GRU_WEIGHTS:
                self._uniform(rng, f"{p}.gru.{name}.{w}", (D, D))
            for b in GRU_BIASES:
                self._fill(f"{p}.gru.{name}.{b}", (D,), 0.0)
        self._uniform(rng, f"{p}.routing.W_dc", (D, C, L, K))
        self._fill(f"{p}.routing.alpha", (), 1.0)
        self._fill(f"{p}.routing.w", (C,), 1.0, decay=True)
        self._fill(f"{p}.routing.b", (C,), 0.0)
        self._uniform(rng, f"{p}.routing.W_coef", (C, L, L + D))
        if c.integrator == "self_attention":
            self._uniform(rng, f"{p}.attention.query", (D,))

    def gru_params(self, behavior: int) -> dict[str, Tensor]:
        name = self._behavior_name(behavior)
        return {k: self.params[f"{self.prefix}.gru.{name}.{k}"] for k in GRU_WEIGHTS + GRU_BIASES}

    def encode(self, batch: Batch, behavior: int, training: bool = False, rng=None) -> Tensor:
        self.encode_calls += 1
        if behavior in self.config.removed_behaviors:
            return T.constant(np.zeros((batch.size, self.config.embed_dim)))
        x = T.embedding(self.params[f"{self.prefix}.item_embeddings"], batch.items[behavior])
        x = self._drop(x, training, rng)
        return gru_sequence(x, batch.masks[behavior], self.gru_params(behavior))

    def gru_encode(self, sequence, behavior: int) -> Tensor:
        """Encode one item sequence with the GRU of ``behavior``; returns a D-vector."""
        seqs = [{behavior: list(sequence)}]
        batch = self.make_batch(seqs)
        return T.reshape(self.encode(batch, behavior), (self.config.embed_dim,))

    def integrate(self, encoded: Tensor, training: bool, rng, trace: RoutingTrace) -> Tensor:
        c = self.config
        p = self.prefix
        items = self.params[f"{p}.item_embeddings"]
        if c.integrator == "sum":
            return T.sum(encoded, axis=1)
        if c.integrator == "self_attention":
            scores = T.scale(T.einsum("bkd,d->bk", encoded, self.params[f"{p}.attention.query"]),
                             1.0 / math.sqrt(c.embed_dim))
            return T.einsum("bk,bkd->bd", T.softmax(scores, axis=-1), encoded)
        u = make_candidate_capsules(encoded, self.params[f"{p}.routing.W_dc"])
        rep, _ = route(u, self.params, p, items, c.routing_iters, trace)
        return rep

    def forward(self, batch: Batch, training: bool = False, rng=None) -> ForwardOutput:
        c = self.config
        trace = RoutingTrace()
        encoded = T.stack([self.encode(batch, b, training, rng) for b in range(c.behavior_count)], axis=1)
        encoded = self._drop(encoded, training, rng)
        trace.encodings.append(encoded.data)
        rep = self.integrate(encoded, training, rng, trace)
        logits, probs = score_items(rep, self.params[f"{self.prefix}.item_embeddings"])
        return ForwardOutput(logits, probs, trace)


class GRUBaseline(SequenceRecommender):
    """Target-behavior GRU whose last hidden state scores items directly."""

    prefix = "gru_baseline"

    def _build(self, rng) -> None:
        c = self.config
        D = c.embed_dim
        name = self._behavior_name(c.target_behavior)
        self._uniform(rng, f"{self.prefix}.item_embeddings", (c.item_count, D))
        for w in GRU_WEIGHTS:
            self._uniform(rng, f"{self.prefix}.gru.{name}.{w}", (D, D))
        for b in GRU_BIASES:
            self._fill(f"{self.prefix}.gru.{name}.{b}", (D,), 0.0)

    def forward(self, batch: Batch, training: bool = False, rng=None) -> ForwardOutput:
        c = self.config
        name = self._behavior_name(c.target_behavior)
        self.encode_calls += 1
        x = T.embedding(self.params[f"{self.prefix}.item_embeddings"], batch.items[c.target_behavior])
        x = self._drop(x, training, rng)
        p = {k: self.params[f"{self.prefix}.gru.{name}.{k}"] for k in GRU_WEIGHTS + GRU_BIASES}
        h = self._drop(gru_sequence(x, batch.masks[c.target_behavior], p), training, rng)
        trace = RoutingTrace(encodings=[h.data])
        logits, probs = score_items(h, self.params[f"{self.prefix}.item_embeddings"])
        return ForwardOutput(logits, probs, trace)
