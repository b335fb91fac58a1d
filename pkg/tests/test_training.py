"""Training loop: aligned loss, optimizer stepping, logging and resuming."""

import csv

import numpy as np
import pytest

import vsparse.autodiff as ad
from vsparse.alignment import align
from vsparse.errors import ConfigError, UsageError
from vsparse.graphs import encode_soft
from vsparse.losses import loss_role as np_loss_role
from vsparse.model import ModelConfig, Proposals, build_params, forward
from vsparse.synth import SynthConfig, generate_dataset
from vsparse.training import (TrainConfig, TrainLog, example_loss, fit,
                              load_checkpoint, resume_fit, save_checkpoint,
                              train_step)


def tiny_world(n_scenes=6, seed=9):
    cfg = SynthConfig(n_entity_classes=6, n_predicate_classes=4, embedding_dim=10,
                      entity_range=(2, 3), predicate_range=(1, 1),
                      arity_weights=(0.0, 1.0, 0.0), distractor_range=(0, 0),
                      seed=seed)
    ds = generate_dataset(cfg, n_scenes)
    mc = ModelConfig(feature_dim=cfg.feature_dim, n_roles=2, n_predicates=2,
                     entity_state_dim=12, predicate_state_dim=12,
                     embedding_dim=cfg.embedding_dim, mp_iterations=1)
    return ds, mc


def forward_example(ex, params, mc):
    props = Proposals(np.asarray(ex.proposals.boxes, dtype=np.float64),
                      np.asarray(ex.proposals.features, dtype=np.float64))
    return forward(props, (ex.width, ex.height), params, mc)


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="semi")
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(align_iterations=0)
        with pytest.raises(ConfigError):
            TrainConfig(role_warmup_epochs=-1)


class TestExampleLoss:
    def distance_setup(self):
        ds, mc = tiny_world()
        params = build_params(mc, ds.vocabulary, np.random.default_rng(1))
        ex = ds.examples[0]
        result = forward_example(ex, params, mc)
        out = result.soft()
        tgt = encode_soft(ex.graph, ds.vocabulary)
        outcome = align(out, tgt, role_weight=10.0, iterations=3)
        return params, ex, result, out, tgt, outcome

    def test_agrees_with_numpy_loss_breakdown(self):
        params, ex, result, out, tgt, outcome = self.distance_setup()
        total, breakdown = example_loss(result, ex.graph, outcome.alignment,
                                        params, TrainConfig())
        # the alignment search scores with the same numpy loss module
        assert breakdown.total == pytest.approx(outcome.breakdown.total, abs=1e-9)
        assert breakdown.entity == pytest.approx(outcome.breakdown.entity, abs=1e-9)
        assert breakdown.role == pytest.approx(outcome.breakdown.role, abs=1e-9)
        assert total.item() == pytest.approx(breakdown.total, abs=1e-12)

    def test_role_term_matches_direct_bce(self):
        params, ex, result, out, tgt, outcome = self.distance_setup()
        _, breakdown = example_loss(result, ex.graph, outcome.alignment,
                                    params, TrainConfig())
        want = np_loss_role(out, tgt, outcome.alignment.entity_pairs,
                            outcome.alignment.predicate_pairs)
        assert breakdown.role == pytest.approx(want, abs=1e-9)

    def test_gradient_flows_only_when_requested(self):
        params, ex, result, out, tgt, outcome = self.distance_setup()
        total, _ = example_loss(result, ex.graph, outcome.alignment, params,
                                TrainConfig(train_class_embeddings=False))
        assert total.requires_grad
        ad.backward(total)
        assert params["embed/entity"].grad is None
        params.zero_grads()

        params["embed/entity"].requires_grad = True
        params["embed/predicate"].requires_grad = True
        total, _ = example_loss(result, ex.graph, outcome.alignment, params,
                                TrainConfig(train_class_embeddings=True))
        ad.backward(total)
        assert params["embed/entity"].grad is not None
        assert np.any(params["embed/entity"].grad != 0.0)


class TestTrainStep:
    def test_raises_on_empty_batch(self):
        ds, mc = tiny_world()
        params = build_params(mc, ds.vocabulary, np.random.default_rng(0))
        with pytest.raises(UsageError):
            train_step([], params, mc, TrainConfig(), ds.vocabulary)

    def test_updates_parameters_and_reduces_loss(self):
        ds, mc = tiny_world(n_scenes=4)
        params = build_params(mc, ds.vocabulary, np.random.default_rng(0))
        before = {k: v.values.copy() for k, v in params.items()}
        tc = TrainConfig(lr=1e-2, batch_size=4)
        first = train_step(ds.examples, params, mc, tc, ds.vocabulary)
        assert any(not np.array_equal(before[k], params[k].values)
                   for k in before)
        for _ in range(30):
            last = train_step(ds.examples, params, mc, tc, ds.vocabulary)
        assert last.total < first.total

    def test_frozen_embeddings_stay_bitwise_identical(self):
        ds, mc = tiny_world(n_scenes=4)
        params = build_params(mc, ds.vocabulary, np.random.default_rng(0))
        ent0 = params["embed/entity"].values.copy()
        train_step(ds.examples, params, mc,
                   TrainConfig(lr=1e-2, train_class_embeddings=False),
                   ds.vocabulary)
        np.testing.assert_array_equal(params["embed/entity"].values, ent0)

    def test_trainable_embeddings_move(self):
        ds, mc = tiny_world(n_scenes=4)
        params = build_params(mc, ds.vocabulary, np.random.default_rng(0))
        ent0 = params["embed/entity"].values.copy()
        train_step(ds.examples, params, mc,
                   TrainConfig(lr=1e-2, train_class_embeddings=True),
                   ds.vocabulary)
        assert not np.array_equal(params["embed/entity"].values, ent0)

    def test_batch_of_empty_graphs_is_a_no_op(self):
        from vsparse.graphs import VspGraph
        from vsparse.synth import Example
        ds, mc = tiny_world(n_scenes=2)
        params = build_params(mc, ds.vocabulary, np.random.default_rng(0))
        empty = VspGraph((), (), frozenset())
        batch = [Example(ex.image_id, ex.width, ex.height, ex.proposals,
                         ex.gt_proposals, empty) for ex in ds.examples]
        before = {k: v.values.copy() for k, v in params.items()}
        breakdown = train_step(batch, params, mc, TrainConfig(), ds.vocabulary)
        assert breakdown.total == 0.0
        for k in before:
            np.testing.assert_array_equal(before[k], params[k].values)


class TestFit:
    def test_history_and_log_rows(self, tmp_path):
        ds, mc = tiny_world(n_scenes=6)
        tc = TrainConfig(lr=1e-3, batch_size=3, epochs=2, seed=4)
        params, history = fit(ds, mc, tc, out_dir=tmp_path)
        assert [h["epoch"] for h in history] == [0, 1]
        assert history[-1]["step"] == 4  # 2 batches per epoch
        assert all(isinstance(h["loss_total"], float) for h in history)

        with open(tmp_path / "train_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(TrainLog.COLUMNS)
        assert len(rows) == 1 + 4
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
        assert (tmp_path / "checkpoint_final.vspc").exists()

    def test_determinism_across_runs(self):
        ds, mc = tiny_world(n_scenes=6)
        tc = TrainConfig(lr=1e-3, batch_size=3, epochs=2, seed=4)
        p1, h1 = fit(ds, mc, tc)
        p2, h2 = fit(ds, mc, tc)
        assert h1[-1]["loss_total"] == h2[-1]["loss_total"]
        for k in p1.names():
            np.testing.assert_array_equal(p1[k].values, p2[k].values)

    def test_resume_replays_bitwise(self, tmp_path):
        ds, mc = tiny_world(n_scenes=6)
        seed = 11
        full_tc = TrainConfig(lr=1e-3, batch_size=3, epochs=3, seed=seed)
        straight, _ = fit(ds, mc, full_tc)

        half_tc = TrainConfig(lr=1e-3, batch_size=3, epochs=2, seed=seed,
                              checkpoint_every=2)
        _, hist = fit(ds, mc, half_tc, out_dir=tmp_path)
        ckpt = tmp_path / "checkpoint_0002.vspc"
        assert ckpt.exists()
        resumed, hist2 = resume_fit(ds, mc, full_tc, str(ckpt))
        assert [h["epoch"] for h in hist2] == [2]
        for k in straight.names():
            np.testing.assert_array_equal(straight[k].values, resumed[k].values)

    def test_role_warmup_equals_manual_two_stage(self):
        # role_warmup_epochs=k is sugar for "k epochs at role_weight=0, then
        # the rest at the configured weight" — must match bitwise
        ds, mc = tiny_world(n_scenes=6)
        tc = TrainConfig(lr=1e-3, batch_size=3, epochs=3, seed=4,
                         role_warmup_epochs=2)
        warmed, _ = fit(ds, mc, tc)

        stage_a = TrainConfig(lr=1e-3, batch_size=3, epochs=2, seed=4,
                              role_weight=0.0)
        params, _ = fit(ds, mc, stage_a)
        stage_b = TrainConfig(lr=1e-3, batch_size=3, epochs=3, seed=4)
        params, _ = fit(ds, mc, stage_b, params=params, start_epoch=2)
        for k in warmed.names():
            np.testing.assert_array_equal(warmed[k].values, params[k].values)

    def test_checkpoint_meta_roundtrip(self, tmp_path):
        ds, mc = tiny_world(n_scenes=2)
        params = build_params(mc, ds.vocabulary, np.random.default_rng(0))
        path = tmp_path / "c.vspc"
        save_checkpoint(str(path), params, epoch=7, step=123)
        loaded, epoch, step = load_checkpoint(str(path))
        assert (epoch, step) == (7, 123)
        for k in params.names():
            np.testing.assert_array_equal(params[k].values, loaded[k].values)

    def test_full_mode_runs_and_uses_boxes(self):
        ds, mc = tiny_world(n_scenes=4)
        tc = TrainConfig(mode="full", lr=1e-3, batch_size=2, epochs=1)
        params, history = fit(ds, mc, tc)
        assert len(history) == 1
        assert np.isfinite(history[0]["loss_total"])
