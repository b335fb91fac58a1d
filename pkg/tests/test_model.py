"""Message-passing model against loop-based numpy oracles.

The oracles recompute attention, aggregation and the recurrent update
with plain loops over nodes and roles — no shared code with the
implementation beyond the parameter store.
"""

import numpy as np
import pytest

import vsparse.autodiff as ad
from vsparse.errors import ConfigError, ShapeError
from vsparse.graphs import BACKGROUND, BBox, SoftGraph, Vocabulary
from vsparse.model import (ModelConfig, Proposals, box_encoding, build_params,
                           class_probabilities, discretize, discretize_mapped,
                           forward, gru_update, init_entity_states, mlp_params,
                           normalize_attention, predicate_confidence,
                           role_attention, vocab_with_current_embeddings)

rng = np.random.default_rng(7031)


def tiny_config(**kw):
    base = dict(feature_dim=10, n_roles=2, n_predicates=3, entity_state_dim=12,
                predicate_state_dim=12, embedding_dim=8, mp_iterations=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_vocab(dim=8, n_roles=2):
    return Vocabulary.create(
        [BACKGROUND, "cup", "lamp", "desk"],
        [BACKGROUND, "on", "near"],
        ["subject", "object", "instrument"][:n_roles],
        dim, np.random.default_rng(3))


def tiny_setup(n_e=4, seed=0, **kw):
    config = tiny_config(**kw)
    vocab = tiny_vocab(dim=config.embedding_dim, n_roles=config.n_roles)
    params = build_params(config, vocab, np.random.default_rng(seed))
    boxes = np.column_stack([
        rng.uniform(0, 80, size=n_e), rng.uniform(0, 80, size=n_e),
        rng.uniform(90, 160, size=n_e), rng.uniform(90, 160, size=n_e)])
    feats = rng.normal(size=(n_e, config.feature_dim))
    return config, vocab, params, Proposals(boxes, feats)


def np_mlp(x, layers, activation="leaky_relu"):
    """Reference MLP: leaky relu between layers, linear at the end."""
    for idx, (w, b) in enumerate(layers):
        x = x @ w.values + b.values
        if activation == "leaky_relu" and idx < len(layers) - 1:
            x = np.where(x > 0, x, 0.01 * x)
    return x


# -- configuration ------------------------------------------------------------

def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        tiny_config(n_roles=0)
    with pytest.raises(ConfigError):
        tiny_config(edge_threshold=1.5)
    with pytest.raises(ConfigError):
        tiny_config(p_null=-0.1)


def test_attention_dim_defaults_to_entity_state_dim():
    assert tiny_config().attention_dim == 12
    assert tiny_config(key_dim=5).attention_dim == 5


def test_proposals_shape_checks():
    with pytest.raises(ShapeError):
        Proposals(np.zeros((2, 3)), np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        Proposals(np.zeros((2, 4)), np.zeros((3, 5)))


# -- encodings ----------------------------------------------------------------

def test_box_encoding_hand_case():
    enc = box_encoding(np.array([[10.0, 20.0, 60.0, 100.0]]), 200.0, 400.0)
    np.testing.assert_allclose(enc[0], [0.05, 0.05, 0.3, 0.25, 0.25, 0.2])


def test_build_params_copies_vocab_embeddings():
    config, vocab, params, _ = tiny_setup()
    np.testing.assert_array_equal(params["embed/entity"].values,
                                  vocab.entity_embeddings)
    v2 = vocab_with_current_embeddings(vocab, params)
    np.testing.assert_array_equal(v2.predicate_embeddings,
                                  params["embed/predicate"].values)


# -- attention ----------------------------------------------------------------

def test_role_attention_matches_loop_oracle():
    config, _, params, props = tiny_setup()
    ents = init_entity_states(props, (200.0, 200.0), params, config)
    preds = params["state/predicate_init"]
    logits = role_attention(preds, ents, params, config)
    assert logits.values.shape == (2, config.n_predicates, props.count)
    for r in range(config.n_roles):
        q = np_mlp(preds.values, mlp_params(params, f"attn/role{r}/query"))
        k = np_mlp(ents.values, mlp_params(params, f"attn/role{r}/key"))
        for kk in range(config.n_predicates):
            for i in range(props.count):
                want = float(np.dot(q[kk], k[i]))
                assert abs(logits.values[r, kk, i] - want) < 1e-10


def test_normalized_attention_bounds():
    for _ in range(50):
        logits = ad.constant(rng.normal(size=(2, 3, 5)) * 4)
        att = normalize_attention(logits, p_null=1.0).values
        assert np.all(att > 0.0) and np.all(att < 1.0)
        assert np.all(att.sum(axis=0) < 1.0)   # roles compete per (k, i)
        assert np.all(att.sum(axis=2) < 1.0)   # entities compete per (r, k)


def test_attention_closed_form_at_zero_logits():
    # two roles, one entity, zero logits, unit null mass:
    # each softmax gives 1/(2+1) resp. 1/(1+1); the product is 1/6
    logits = ad.constant(np.zeros((2, 1, 1)))
    att = normalize_attention(logits, p_null=1.0).values
    np.testing.assert_allclose(att, 1.0 / 6.0, atol=1e-12)


def test_attention_saturates_with_large_logit():
    logits = np.zeros((2, 2, 3))
    logits[0, 0, 1] = 50.0
    att = normalize_attention(ad.constant(logits), p_null=1.0).values
    assert att[0, 0, 1] > 0.999999


# -- aggregation and recurrence ----------------------------------------------

def test_aggregate_to_predicates_matches_loop_oracle():
    from vsparse.model import aggregate_to_predicates
    config, _, params, props = tiny_setup()
    ents = init_entity_states(props, (200.0, 200.0), params, config)
    att = normalize_attention(
        role_attention(params["state/predicate_init"], ents, params, config), 1.0)
    msg = aggregate_to_predicates(att, ents, params, config)

    sent = np_mlp(ents.values, mlp_params(params, "msg/to_pred/send"))
    total = np.zeros((config.n_predicates, config.predicate_state_dim))
    for r in range(config.n_roles):
        pooled = np.zeros_like(sent[: config.n_predicates])
        pooled = att.values[r] @ sent
        total += np_mlp(pooled, mlp_params(params, f"msg/to_pred/pool{r}"))
    expect = np_mlp(total, mlp_params(params, "msg/to_pred/recv"))
    np.testing.assert_allclose(msg.values, expect, atol=1e-10)


def test_aggregate_to_entities_transposes_attention():
    from vsparse.model import aggregate_to_entities
    config, _, params, props = tiny_setup()
    ents = init_entity_states(props, (200.0, 200.0), params, config)
    preds = params["state/predicate_init"]
    att = normalize_attention(role_attention(preds, ents, params, config), 1.0)
    msg = aggregate_to_entities(att, preds, params, config)

    sent = np_mlp(preds.values, mlp_params(params, "msg/to_ent/send"))
    total = np.zeros((props.count, config.entity_state_dim))
    for r in range(config.n_roles):
        pooled = att.values[r].T @ sent
        total += np_mlp(pooled, mlp_params(params, f"msg/to_ent/pool{r}"))
    expect = np_mlp(total, mlp_params(params, "msg/to_ent/recv"))
    np.testing.assert_allclose(msg.values, expect, atol=1e-10)


def test_gru_update_matches_reference_cell():
    config, _, params, _ = tiny_setup()
    h = ad.constant(rng.normal(size=(3, 12)))
    x = ad.constant(rng.normal(size=(3, 12)))
    out = gru_update(h, x, params, "gru/predicate")

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    def gate(name, act, hidden):
        pre = (x.values @ params[f"gru/predicate/{name}/wx"].values
               + hidden @ params[f"gru/predicate/{name}/wh"].values
               + params[f"gru/predicate/{name}/b"].values)
        return act(pre)

    r = gate("reset", sig, h.values)
    z = gate("update", sig, h.values)
    c = gate("candidate", np.tanh, r * h.values)
    expect = (1 - z) * h.values + z * c
    np.testing.assert_allclose(out.values, expect, atol=1e-12)


def test_gru_zero_update_gate_keeps_state():
    # force z -> 0 by driving the update-gate bias strongly negative
    config, _, params, _ = tiny_setup()
    params["gru/entity/update/wx"].values[:] = 0.0
    params["gru/entity/update/wh"].values[:] = 0.0
    params["gru/entity/update/b"].values[:] = -50.0
    h = ad.constant(rng.normal(size=(2, 12)))
    x = ad.constant(rng.normal(size=(2, 12)))
    out = gru_update(h, x, params, "gru/entity")
    np.testing.assert_allclose(out.values, h.values, atol=1e-12)


def test_gru_shape_mismatch_raises():
    config, _, params, _ = tiny_setup()
    with pytest.raises(ShapeError):
        gru_update(ad.constant(np.zeros((2, 12))), ad.constant(np.zeros((3, 12))),
                   params, "gru/entity")


# -- the full forward pass ----------------------------------------------------

def test_forward_shapes_and_determinism():
    config, vocab, params, props = tiny_setup()
    res1 = forward(props, (200.0, 200.0), params, config)
    res2 = forward(props, (200.0, 200.0), params, config)
    assert res1.entity_embeddings.values.shape == (props.count, config.embedding_dim)
    assert res1.predicate_embeddings.values.shape == (config.n_predicates,
                                                      config.embedding_dim)
    assert res1.attention.values.shape == (2, config.n_predicates, props.count)
    np.testing.assert_array_equal(res1.attention.values, res2.attention.values)
    assert [b.as_list() for b in res1.boxes] == [list(r) for r in props.boxes]


def test_forward_is_entity_permutation_equivariant():
    config, vocab, params, props = tiny_setup(n_e=5)
    perm = np.array([3, 0, 4, 1, 2])
    permuted = Proposals(props.boxes[perm], props.features[perm])
    with ad.no_grad():
        a = forward(props, (200.0, 200.0), params, config)
        b = forward(permuted, (200.0, 200.0), params, config)
    np.testing.assert_allclose(b.entity_embeddings.values,
                               a.entity_embeddings.values[perm], atol=1e-9)
    np.testing.assert_allclose(b.predicate_embeddings.values,
                               a.predicate_embeddings.values, atol=1e-9)
    np.testing.assert_allclose(b.attention.values,
                               a.attention.values[:, :, perm], atol=1e-9)


def test_forward_gradients_reach_every_parameter_group():
    config, vocab, params, props = tiny_setup()
    res = forward(props, (200.0, 200.0), params, config)
    loss = ad.add(ad.sum_all(ad.square(res.entity_embeddings)),
                  ad.add(ad.sum_all(ad.square(res.predicate_embeddings)),
                         ad.sum_all(ad.square(res.attention))))
    ad.backward(loss)
    missing = [name for name, t in params.items()
               if t.grad is None and not name.startswith("embed/")]
    assert missing == []


def test_shared_attention_tape_matches_duplicated_tapes():
    # one attention tensor fans out into both aggregation directions during a
    # message-passing round; the parameter gradients must equal those from an
    # otherwise-identical graph that rebuilds the attention per direction
    from vsparse.model import aggregate_to_entities, aggregate_to_predicates
    config, _, params, props = tiny_setup(seed=5)

    def grads(shared):
        params.zero_grads()
        ents = init_entity_states(props, (200.0, 200.0), params, config)
        preds = params["state/predicate_init"]
        first = normalize_attention(
            role_attention(preds, ents, params, config), 1.0)
        second = first if shared else normalize_attention(
            role_attention(preds, ents, params, config), 1.0)
        loss = ad.add(
            ad.sum_all(aggregate_to_predicates(first, ents, params, config)),
            ad.sum_all(aggregate_to_entities(second, preds, params, config)))
        ad.backward(loss)
        return {n: t.grad.copy() for n, t in params.items()
                if t.grad is not None}

    one_tape, two_tapes = grads(True), grads(False)
    assert set(one_tape) == set(two_tapes)
    for name in one_tape:
        np.testing.assert_allclose(one_tape[name], two_tapes[name],
                                   rtol=1e-10, atol=1e-12)


# -- discretization -----------------------------------------------------------

def test_discretize_removes_background_nodes():
    vocab = tiny_vocab(dim=4)
    config = tiny_config(embedding_dim=4, n_predicates=2)
    ent = np.stack([vocab.entity_embeddings[0],    # background -> dropped
                    vocab.entity_embeddings[2]])
    pred = np.stack([vocab.predicate_embeddings[1],
                     vocab.predicate_embeddings[0]])  # background -> dropped
    att = np.zeros((2, 2, 2))
    att[0, 0, 1] = 0.9
    att[1, 0, 0] = 0.9    # points at the background entity: must vanish
    g, ent_rows, pred_rows = discretize_mapped(SoftGraph(ent, pred, att), vocab, config)
    assert list(ent_rows) == [1]
    assert list(pred_rows) == [0]
    assert g.n_entities == 1 and g.n_predicates == 1
    assert g.edges == frozenset({(0, 0, 0)})


def test_discretize_threshold_and_argmax_role():
    vocab = tiny_vocab(dim=4)
    config = tiny_config(embedding_dim=4, n_predicates=1, edge_threshold=0.5)
    ent = np.stack([vocab.entity_embeddings[1], vocab.entity_embeddings[2]])
    pred = vocab.predicate_embeddings[[1]]
    att = np.zeros((2, 1, 2))
    att[0, 0, 0] = 0.60   # subject wins at entity 0
    att[1, 0, 0] = 0.55   # loses the role argmax despite clearing threshold
    att[1, 0, 1] = 0.49   # object's best entity is below threshold
    g = discretize(SoftGraph(ent, pred, att), vocab, config)
    assert g.edges == frozenset({(0, 0, 0)})


def test_discretize_keeps_strongest_entity_per_role():
    vocab = tiny_vocab(dim=4)
    config = tiny_config(embedding_dim=4, n_predicates=1)
    ent = np.stack([vocab.entity_embeddings[1]] * 3)
    pred = vocab.predicate_embeddings[[2]]
    att = np.zeros((2, 1, 3))
    att[0, 0] = [0.7, 0.9, 0.7]
    g = discretize(SoftGraph(ent, pred, att), vocab, config)
    assert g.edges == frozenset({(0, 1, 0)})


def test_discretize_tie_keeps_lowest_entity_index():
    vocab = tiny_vocab(dim=4)
    config = tiny_config(embedding_dim=4, n_predicates=1)
    ent = np.stack([vocab.entity_embeddings[1]] * 2)
    pred = vocab.predicate_embeddings[[1]]
    att = np.zeros((2, 1, 2))
    att[1, 0] = [0.8, 0.8]    # exact tie
    g = discretize(SoftGraph(ent, pred, att), vocab, config)
    assert g.edges == frozenset({(0, 0, 1)})


def test_class_probabilities_rows_sum_to_one_and_rank_by_distance():
    vocab = tiny_vocab(dim=4)
    probs = class_probabilities(vocab.entity_embeddings[2][None, :],
                                vocab.entity_embeddings)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-12)
    assert probs[0].argmax() == 2


# -- ranked triplets ----------------------------------------------------------

def build_soft_for_confidence(vocab):
    # two predicates; the second lacks an object edge and must not rank
    ent = np.stack([vocab.entity_embeddings[1], vocab.entity_embeddings[2]])
    pred = np.stack([vocab.predicate_embeddings[1], vocab.predicate_embeddings[2]])
    att = np.zeros((2, 2, 2))
    att[0, 0, 0] = 0.9
    att[1, 0, 1] = 0.8
    att[0, 1, 1] = 0.7    # subject only
    boxes = (BBox(0, 0, 10, 10), BBox(20, 0, 30, 10))
    return SoftGraph(ent, pred, att, boxes)


def test_predicate_confidence_requires_both_roles():
    vocab = tiny_vocab(dim=4)
    config = tiny_config(embedding_dim=4, n_predicates=2)
    ranked = predicate_confidence(build_soft_for_confidence(vocab), vocab, config)
    assert len(ranked) == 1
    t = ranked[0]
    assert (t.subject_class, t.predicate_class, t.object_class) == (1, 1, 2)
    assert t.subject_box.as_list() == [0.0, 0.0, 10.0, 10.0]


def test_predicate_confidence_score_is_probability_product():
    vocab = tiny_vocab(dim=4)
    config = tiny_config(embedding_dim=4, n_predicates=2)
    soft = build_soft_for_confidence(vocab)
    ranked = predicate_confidence(soft, vocab, config)
    eprob = class_probabilities(soft.entity_embeddings, vocab.entity_embeddings)
    pprob = class_probabilities(soft.predicate_embeddings, vocab.predicate_embeddings)
    want = eprob[0, 1] * eprob[1, 2] * pprob[0, 1]
    assert abs(ranked[0].score - want) < 1e-12


def test_predicate_confidence_sorted_descending_ties_by_node():
    vocab = tiny_vocab(dim=4)
    config = tiny_config(embedding_dim=4, n_predicates=3)
    ent = np.stack([vocab.entity_embeddings[1], vocab.entity_embeddings[2]])
    pred = np.stack([vocab.predicate_embeddings[1]] * 3)  # identical scores
    att = np.zeros((2, 3, 2))
    att[0, :, 0] = 0.9
    att[1, :, 1] = 0.9
    ranked = predicate_confidence(SoftGraph(ent, pred, att), vocab, config)
    assert [t.predicate_node for t in ranked] == [0, 1, 2]
    assert all(a.score >= b.score for a, b in zip(ranked, ranked[1:]))
