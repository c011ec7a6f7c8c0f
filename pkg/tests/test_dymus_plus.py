import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dymus import tensor as T
from dymus.models import (ModelConfig, build_model, candidate_capsules_plus, capsule_multiply,
                          dynamic_gru_step, dynamic_sequence, update_adjusting_state)
from dymus.models.dymus_plus import gated_inputs
from dymus.training import bce_loss

from gradcheck import model_grad_errors
from oracles import dymus_plus_oracle, dynamic_gru_oracle, route_oracle

BEHAVIORS = ["purchase", "cart", "click"]


def plus_model(D=5, L=3, r=2, items=7, behaviors=BEHAVIORS, seed=0, **kw):
    return build_model(ModelConfig(items, behaviors, kind="dymus_plus", embed_dim=D, capsule_len=L,
                                   routing_iters=r, seed=seed, **kw))


def jitter(model, scale=0.3, seed=0):
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = p.data + rng.normal(scale=scale, size=p.shape)
    return model


def random_params(D, L, rng, zero=False):
    p = {}
    for g in "rzn":
        p[f"W_i{g}"] = np.zeros((D, L, D)) if zero else rng.normal(size=(D, L, D))
        for pre in ("W_h", "W_c"):
            p[f"{pre}{g}"] = np.zeros((D, L, L)) if zero else rng.normal(size=(D, L, L))
        p[f"B_c{g}"] = np.zeros((D, L)) if zero else rng.normal(size=(D, L))
        p[f"B_{g}"] = np.zeros((D, L)) if zero else rng.normal(size=(D, L))
    return {k: T.constant(v) for k, v in p.items()}


# ---------------------------------------------------------------------------
# capsule-wise multiplication
# ---------------------------------------------------------------------------

def test_identity_blocks_return_input():
    h = np.random.default_rng(0).normal(size=(4, 3))
    out = capsule_multiply(T.constant(np.stack([np.eye(3)] * 4)), T.constant(h))
    np.testing.assert_array_equal(out.data, h)


def test_hand_capsule_product():
    out = capsule_multiply(T.constant([[[2.0]], [[3.0]]]), T.constant([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[10.0], [21.0]])


def test_zero_hidden_gives_zero():
    w = T.constant(np.random.default_rng(0).normal(size=(3, 2, 4)))
    np.testing.assert_array_equal(capsule_multiply(w, T.constant(np.zeros((3, 4)))).data, np.zeros((3, 2)))


def test_capsule_multiply_shape_error():
    with pytest.raises(T.ShapeError, match="capsule_multiply"):
        capsule_multiply(T.constant(np.ones((3, 2, 4))), T.constant(np.ones((3, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_capsule_rows_never_mix(D, L1, L2, seed):
    rng = np.random.default_rng(seed)
    w, h = rng.normal(size=(D, L2, L1)), rng.normal(size=(D, L1))
    d = seed % D
    bumped = h.copy()
    bumped[d] += 1.0
    a = capsule_multiply(T.constant(w), T.constant(h)).data
    b = capsule_multiply(T.constant(w), T.constant(bumped)).data
    others = [i for i in range(D) if i != d]
    np.testing.assert_array_equal(a[others], b[others])


# ---------------------------------------------------------------------------
# dynamic GRU
# ---------------------------------------------------------------------------

def test_zero_adjusting_state_reduces_to_bias_modulation():
    rng = np.random.default_rng(1)
    p = random_params(4, 2, rng)
    x = T.constant(rng.normal(size=(1, 1, 4)))
    zero = gated_inputs(x, T.constant(np.zeros((1, 1, 4, 2))), p)
    for g in "rzn":
        expected = np.einsum("dlk,k->dl", p[f"W_i{g}"].data, x.data[0, 0]) * p[f"B_c{g}"].data
        np.testing.assert_allclose(zero[g].data[0, 0], expected, atol=1e-15)
        np.testing.assert_array_equal(gated_inputs(x, None, p)[g].data, zero[g].data)


def test_all_zero_params_halve_the_previous_state():
    p = random_params(3, 2, None, zero=True)
    h_prev = T.constant(np.random.default_rng(0).normal(size=(3, 2)))
    gates = {g: T.constant(np.zeros((3, 2))) for g in "rzn"}
    h, n = dynamic_gru_step(gates, h_prev, p)
    np.testing.assert_allclose(h.data, 0.5 * h_prev.data, atol=1e-15)
    np.testing.assert_array_equal(n.data, np.zeros((3, 2)))
    x = T.constant(np.ones((1, 4, 3)))
    H, _ = dynamic_sequence(x, np.ones((1, 4), dtype=bool), None, p, 2)
    np.testing.assert_array_equal(H.data, np.zeros((1, 3, 2)))


def test_output_depends_on_adjusting_state():
    rng = np.random.default_rng(2)
    p = random_params(4, 2, rng)
    x = T.constant(rng.normal(size=(1, 3, 4)))
    mask = np.ones((1, 3), dtype=bool)
    adj = rng.normal(size=(1, 3, 4, 2))
    a, _ = dynamic_sequence(x, mask, T.constant(adj), p, 2)
    b, _ = dynamic_sequence(x, mask, T.constant(adj + 1.0), p, 2)
    assert not np.allclose(a.data, b.data)


def test_empty_sequence_encodes_to_zero_matrix():
    m = plus_model()
    out = m.predict([{0: [1, 2, 3]}])
    np.testing.assert_array_equal(out.trace.encodings[-1][0, 2], np.zeros((5, 3)))


def test_one_item_first_iteration_is_one_step():
    rng = np.random.default_rng(3)
    p = random_params(4, 2, rng)
    x = T.constant(rng.normal(size=(1, 1, 4)))
    H, _ = dynamic_sequence(x, np.ones((1, 1), dtype=bool), None, p, 2)
    gates = {g: v[:, 0] for g, v in gated_inputs(x, None, p).items()}
    h1, _ = dynamic_gru_step(gates, T.constant(np.zeros((1, 4, 2))), p)
    np.testing.assert_array_equal(H.data, h1.data)


def test_dynamic_sequence_matches_oracle_on_three_items():
    rng = np.random.default_rng(4)
    D, L = 4, 3
    p = random_params(D, L, rng)
    emb = rng.normal(size=(6, D))
    seq = [2, 0, 5]
    adj = rng.normal(size=(3, D, L))
    x = T.constant(emb[seq][None])
    H, N = dynamic_sequence(x, np.ones((1, 3), dtype=bool), T.constant(adj[None]), p, L)
    H_o, N_o = dynamic_gru_oracle(seq, emb, {k: v.data for k, v in p.items()}, adj, L)
    assert np.abs(H.data[0] - H_o).max() < 1e-10
    assert np.abs(N.data[0] - np.array(N_o)).max() < 1e-10


# ---------------------------------------------------------------------------
# row-wise candidates and adjusting state
# ---------------------------------------------------------------------------

def test_zero_encodings_zero_candidates_and_homogeneity():
    rng = np.random.default_rng(5)
    w = T.constant(rng.normal(size=(3, 2, 3, 2)))
    np.testing.assert_array_equal(candidate_capsules_plus(T.constant(np.zeros((1, 2, 3, 2))), w).data,
                                  np.zeros((1, 3, 3, 2)))
    E = rng.normal(size=(2, 2, 3, 2))
    a = candidate_capsules_plus(T.constant(E), w).data
    np.testing.assert_allclose(candidate_capsules_plus(T.constant(2 * E), w).data, 2 * a, rtol=1e-15)


def test_single_behavior_unit_weights_broadcast_rows():
    E = np.array([[[1.0, 2.0], [3.0, 4.0]]])          # one behavior, D=2, L=2
    u = candidate_capsules_plus(T.constant(E[None]), T.constant(np.ones((2, 2, 2, 1)))).data[0]
    for d in range(2):
        for c in range(2):
            np.testing.assert_array_equal(u[d, c], E[0, d])


def test_adjusting_update_identities():
    rng = np.random.default_rng(6)
    prev = T.constant(rng.normal(size=(1, 2, 3, 2)))
    r = T.constant(rng.normal(size=(1, 3, 2)))
    n = T.constant(rng.normal(size=(1, 2, 3, 2)))
    np.testing.assert_array_equal(update_adjusting_state(prev, T.constant(np.zeros((1, 2, 3, 2))), r).data, prev.data)
    np.testing.assert_array_equal(update_adjusting_state(prev, n, T.constant(np.zeros((1, 3, 2)))).data, prev.data)


def test_adjusting_rows_follow_integration_rows():
    r = np.stack([c * np.ones(2) for c in range(3)])[None]
    out = update_adjusting_state(None, T.constant(np.ones((1, 1, 3, 2))), T.constant(r)).data
    for c in range(3):
        np.testing.assert_array_equal(out[0, 0, c], np.full(2, float(c)))


def test_no_adjusting_update_after_last_iteration():
    with pytest.raises(ValueError):
        update_adjusting_state(None, T.constant(np.ones((1, 1, 2, 2))), T.constant(np.ones((1, 2, 2))), 2, 2)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def random_context(rng, items=7):
    return {b: list(rng.integers(0, items, rng.integers(1, 5))) for b in range(3)}


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for seed in range(8):
        m = jitter(plus_model(r=3, seed=seed), seed=seed)
        ctx = random_context(rng)
        P = {k: v.data for k, v in m.params.items()}
        probs, v, gates = dymus_plus_oracle(P, ctx, BEHAVIORS, 3, 3)
        out = m.predict([ctx])
        assert np.abs(out.probs.data[0] - probs).max() < 1e-9
        assert np.abs(out.trace.representations[-1][0] - v).max() < 1e-9


def test_single_iteration_is_uniform_capsule_gru():
    m = jitter(plus_model(r=1))
    ctx = random_context(np.random.default_rng(1))
    out = m.predict([ctx])
    assert not out.trace.adjusting[0]
    np.testing.assert_array_equal(out.trace.coefficients[0], np.full((1, 5, 5), 0.2))
    P = {k: v.data for k, v in m.params.items()}
    u = out.trace.candidates[0][0]
    v, _, _ = route_oracle(u, P, "dymus_plus", P["dymus_plus.item_embeddings"], 1)
    np.testing.assert_allclose(out.trace.representations[0][0], v, atol=1e-14)


def test_reencodes_every_iteration_and_starts_from_zero_state():
    m = plus_model(r=2)
    out = m.predict([random_context(np.random.default_rng(2))])
    assert m.encode_calls == 2 * 3
    assert out.trace.adjusting[0] == {}
    assert set(out.trace.adjusting[1]) == {0, 1, 2}


def test_logits_carry_over_across_iterations():
    m = jitter(plus_model(r=3))
    tr = m.predict([random_context(np.random.default_rng(3))]).trace
    for it in range(2):
        inc = np.einsum("bdcl,bcl->bdc", tr.candidates[it], tr.integration[it])
        np.testing.assert_allclose(tr.logits[it + 1], tr.logits[it] + inc, atol=1e-12)


def test_adjusting_state_accumulates_gates_times_integration():
    m = jitter(plus_model(r=3))
    tr = m.predict([random_context(np.random.default_rng(4))]).trace
    for b in range(3):
        step1 = tr.new_gates[0][b] * tr.integration[0][:, None]
        np.testing.assert_allclose(tr.adjusting[1][b], step1, atol=1e-14)
        np.testing.assert_allclose(tr.adjusting[2][b], step1 + tr.new_gates[1][b] * tr.integration[1][:, None],
                                   atol=1e-14)


def test_eval_forward_is_deterministic():
    m = jitter(plus_model())
    ctx = [random_context(np.random.default_rng(5))]
    assert np.array_equal(m.predict(ctx).probs.data, m.predict(ctx).probs.data)


def test_end_to_end_gradient_check_covers_gate_paths():
    m = plus_model(D=4, L=2, items=6, behaviors=["purchase", "click"], seed=3)
    rng = np.random.default_rng(3)
    ctxs = [{0: list(rng.integers(0, 6, 3)), 1: list(rng.integers(0, 6, 4))} for _ in range(3)]
    labels = rng.integers(0, 6, 3)
    batch = m.make_batch(ctxs)
    errors = model_grad_errors(m, lambda mm: bce_loss(mm.forward(batch).probs, labels), h=1e-4)
    assert max(errors.values()) < 1e-3
    assert np.any(m.params["dymus_plus.dgru.click.W_cz"].grad != 0)
    assert np.any(m.params["dymus_plus.dgru.click.B_cn"].grad != 0)

