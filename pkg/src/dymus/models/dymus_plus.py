"""Capsule-state dynamic GRUs whose inputs are re-gated by routing feedback."""
from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .base import Batch, ForwardOutput, RoutingTrace, SequenceRecommender, routing_phase, routing_update, score_items

GATES = ("r", "z", "n")
_LEAD = "abefg"


def capsule_multiply(w: Tensor, h: Tensor) -> Tensor:
    """Row-wise product: out[..., d, :] = w[d] @ h[..., d, :].

    ``w`` is (D, L2, L1); ``h`` is (..., D, L1) with up to five leading axes.
    """
    if w.ndim != 3 or h.ndim < 2 or h.shape[-2] != w.shape[0] or h.shape[-1] != w.shape[2]:
        raise T.ShapeError("capsule_multiply", w.shape, h.shape)
    lead = _LEAD[: h.ndim - 2]
    return T.einsum(f"dml,{lead}dl->{lead}dm", w, h)


def candidate_capsules_plus(encoded: Tensor, w_d: Tensor) -> Tensor:
    """Per-row candidates from (batch, |B|, D, L) encodings and (D, L, C, |B|) weights.

    u[b, d, c, l] = sum_k w_d[d, l, c, k] * encoded[b, k, d, l].
    """
    if encoded.ndim != 4 or w_d.ndim != 4 or encoded.shape[1] != w_d.shape[3] \
            or encoded.shape[2] != w_d.shape[0] or encoded.shape[3] != w_d.shape[1]:
        raise T.ShapeError("candidate_capsules_plus", encoded.shape, w_d.shape)
    return T.einsum("dlck,bkdl->bdcl", w_d, encoded)


def update_adjusting_state(adjust: Tensor | None, new_gates: Tensor, result: Tensor,
                           iteration: int | None = None, iters: int | None = None) -> Tensor:
    """C_next = C + N * R with R the (batch, C, L) integration result stacked as rows.

    ``new_gates`` is (batch, T, D, L).  ``adjust=None`` stands for the zero
    state of the first iteration.
    """
    if iteration is not None and iters is not None and iteration >= iters:
        raise ValueError("update_adjusting_state: no update after the last routing iteration")
    batch, n_caps, length = result.shape
    if new_gates.shape[-2:] != (n_caps, length):
        raise T.ShapeError("update_adjusting_state", new_gates.shape, result.shape)
    step = new_gates * T.reshape(result, (batch, 1, n_caps, length))
    return step if adjust is None else adjust + step


def dynamic_gru_step(x_gates: dict[str, Tensor], h_prev: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One recurrence step given the already-gated input terms ``x_gates[g]`` (…, D, L).

    ``x_gates[g]`` holds W^{ig} i * (W^{cg} (x) C_k + B^{cg}).  Returns (H_k, N_k).
    """
    r = T.sigmoid(x_gates["r"] + capsule_multiply(p["W_hr"], h_prev) + p["B_r"])
    z = T.sigmoid(x_gates["z"] + capsule_multiply(p["W_hz"], h_prev) + p["B_z"])
    n = T.tanh(x_gates["n"] + r * capsule_multiply(p["W_hn"], h_prev) + p["B_n"])
    return z * n + (1.0 - z) * h_prev, n


def gated_inputs(x: Tensor, adjust: Tensor | None, p: dict[str, Tensor]) -> dict[str, Tensor]:
    """Input terms of all positions at once: (batch, T, D) embeddings -> (batch, T, D, L) per gate."""
    out = {}
    for g in GATES:
        projected = T.einsum("dlk,btk->btdl", p[f"W_i{g}"], x)
        mod = p[f"B_c{g}"] if adjust is None else capsule_multiply(p[f"W_c{g}"], adjust) + p[f"B_c{g}"]
        out[g] = projected * mod
    return out


def dynamic_sequence(x: Tensor, mask: np.ndarray, adjust: Tensor | None, p: dict[str, Tensor],
                     length: int) -> tuple[Tensor, Tensor | None]:
    """Run the dynamic GRU over left-padded inputs; returns (H_last, stacked new gates)."""
    batch, steps, dim = x.shape
    h = T.constant(np.zeros((batch, dim, length)))
    if steps == 0:
        return h, None
    gates = gated_inputs(x, adjust, p)
    news = []
    for t in range(steps):
        m = mask[:, t]
        if not m.any():
            news.append(T.constant(np.zeros((batch, dim, length))))
            continue
        h_new, n = dynamic_gru_step({g: gates[g][:, t] for g in GATES}, h, p)
        h = h_new if m.all() else T.where(m[:, None, None], h_new, h)
        news.append(n)
    return h, T.stack(news, axis=1)


class DyMuSPlus(SequenceRecommender):
    prefix = "dymus_plus"

    def _build(self, rng) -> None:
        c = self.config
        D, L, K, C = c.embed_dim, c.capsule_len, c.behavior_count, c.final_capsules
        p = self.prefix
        self._uniform(rng, f"{p}.item_embeddings", (c.item_count, D))
        for name in c.behaviors:
            for g in GATES:
                self._uniform(rng, f"{p}.dgru.{name}.W_i{g}", (D, L, D))
            for g in GATES:
                self._uniform(rng, f"{p}.dgru.{name}.W_h{g}", (D, L, L))
                self._uniform(rng, f"{p}.dgru.{name}.W_c{g}", (D, L, L))
            for g in GATES:
                # ones: the input passes unmodulated while the adjusting state is zero
                self._fill(f"{p}.dgru.{name}.B_c{g}", (D, L), 1.0)
                self._fill(f"{p}.dgru.{name}.B_{g}", (D, L), 0.0)
        self._uniform(rng, f"{p}.routing.W_d", (D, L, C, K))
        self._fill(f"{p}.routing.alpha", (), 1.0)
        self._fill(f"{p}.routing.w", (C,), 1.0, decay=True)
        self._fill(f"{p}.routing.b", (C,), 0.0)
        self._uniform(rng, f"{p}.routing.W_coef", (C, L, L + D))
        if c.integrator == "self_attention":
            self._uniform(rng, f"{p}.attention.query", (D, L))

    def dgru_params(self, behavior: int) -> dict[str, Tensor]:
        name = self._behavior_name(behavior)
        keys = [f"W_i{g}" for g in GATES] + [f"W_h{g}" for g in GATES] + [f"W_c{g}" for g in GATES] \
            + [f"B_c{g}" for g in GATES] + [f"B_{g}" for g in GATES]
        return {k: self.params[f"{self.prefix}.dgru.{name}.{k}"] for k in keys}

    def dynamic_encode(self, batch: Batch, behavior: int, adjust: Tensor | None,
                       training: bool = False, rng=None) -> tuple[Tensor, Tensor | None]:
        """Encode one behavior under the current adjusting states; returns (E^b, new gates)."""
        self.encode_calls += 1
        c = self.config
        if behavior in c.removed_behaviors:
            return T.constant(np.zeros((batch.size, c.embed_dim, c.capsule_len))), None
        x = T.embedding(self.params[f"{self.prefix}.item_embeddings"], batch.items[behavior])
        x = self._drop(x, training, rng)
        return dynamic_sequence(x, batch.masks[behavior], adjust, self.dgru_params(behavior), c.capsule_len)

    def _summarize(self, states: Tensor) -> Tensor:
        p = self.prefix
        return T.l2_norm(states, axis=-1) * self.params[f"{p}.routing.w"] + self.params[f"{p}.routing.b"]

    def forward(self, batch: Batch, training: bool = False, rng=None) -> ForwardOutput:
        c = self.config
        p = self.prefix
        K = c.behavior_count
        items = self.params[f"{p}.item_embeddings"]
        trace = RoutingTrace()
        iters = c.routing_iters if c.integrator == "dynamic_routing" else 1
        adjust: dict[int, Tensor | None] = {b: None for b in range(K)}
        logits = T.constant(np.zeros((batch.size, c.embed_dim, c.final_capsules)))
        alpha, w, b = (self.params[f"{p}.routing.{n}"] for n in ("alpha", "w", "b"))
        rep = None
        for it in range(iters):
            outs = [self.dynamic_encode(batch, k, adjust[k], training, rng) for k in range(K)]
            encoded = self._drop(T.stack([h for h, _ in outs], axis=1), training, rng)
            trace.encodings.append(encoded.data)
            trace.new_gates.append({k: n.data for k, (_, n) in enumerate(outs) if n is not None})
            trace.adjusting.append({k: a.data for k, a in adjust.items() if a is not None})
            if c.integrator == "sum":
                rep = self._summarize(T.sum(encoded, axis=1))
                break
            if c.integrator == "self_attention":
                scores = T.scale(T.einsum("bkdl,dl->bk", encoded, self.params[f"{p}.attention.query"]),
                                 1.0 / math.sqrt(c.embed_dim * c.capsule_len))
                rep = self._summarize(T.einsum("bk,bkdl->bdl", T.softmax(scores, axis=-1), encoded))
                break
            u = candidate_capsules_plus(encoded, self.params[f"{p}.routing.W_d"])
            coef, capsules, rep = routing_phase(u, logits, alpha, w, b)
            trace.logits.append(logits.data)
            trace.coefficients.append(coef.data)
            trace.capsules.append(capsules.data)
            trace.representations.append(rep.data)
            trace.candidates.append(u.data)
            if it < iters - 1:
                predicted, result, logits = routing_update(u, logits, capsules, rep, items,
                                                           self.params[f"{p}.routing.W_coef"])
                trace.predicted.append(predicted.data)
                trace.integration.append(result.data)
                for k, (_, n) in enumerate(outs):
                    if n is not None:
                        adjust[k] = update_adjusting_state(adjust[k], n, result, it, iters)
        scores_logits, probs = score_items(rep, items)
        return ForwardOutput(scores_logits, probs, trace)
