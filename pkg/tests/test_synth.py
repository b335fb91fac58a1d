"""Scene generator and dataset files.

The realizability checks pin the property the whole training story leans
on: at zero noise the graph is recoverable from the proposals alone.
"""

import json
import os

import numpy as np
import pytest

from vsparse.errors import ConfigError, FormatError, GenerationError
from vsparse.graphs import BACKGROUND, vsp_to_sgg
from vsparse.synth import (Dataset, SceneSampler, SynthConfig, config_from_dict,
                           config_to_dict, generate_dataset, read_dataset,
                           read_proposal_file, write_dataset)


def small_cfg(**kw):
    base = dict(n_entity_classes=8, n_predicate_classes=5, embedding_dim=16,
                entity_range=(2, 4), predicate_range=(1, 2),
                arity_weights=(0.0, 1.0, 0.0), distractor_range=(0, 1), seed=11)
    base.update(kw)
    return SynthConfig(**base)


# -- config validation --------------------------------------------------------

def test_config_rejects_impossible_shapes():
    with pytest.raises(ConfigError):
        small_cfg(n_roles=5)
    with pytest.raises(ConfigError):
        small_cfg(entity_range=(4, 2))
    with pytest.raises(ConfigError):
        small_cfg(arity_weights=(0.0, 0.0, 0.0))
    with pytest.raises(ConfigError):
        # ternary predicates with only two roles configured
        small_cfg(arity_weights=(0.0, 0.5, 0.5))
    with pytest.raises(ConfigError):
        # scenes draw distinct predicate classes, so the range is capped
        small_cfg(predicate_range=(1, 9))
    with pytest.raises(ConfigError):
        # binary signatures need two distinct participant classes
        small_cfg(n_entity_classes=2)
    with pytest.raises(ConfigError):
        small_cfg(feature_noise=-0.5)


def test_feature_dim_is_embedding_plus_box_encoding():
    assert small_cfg(embedding_dim=20).feature_dim == 26


def test_config_dict_roundtrip_and_unknown_key():
    cfg = small_cfg(feature_noise=0.25)
    assert config_from_dict(config_to_dict(cfg)) == cfg
    with pytest.raises(ConfigError, match="unknown synth config"):
        config_from_dict({"n_entity_classes": 8, "wibble": 3})


# -- the generative rule ------------------------------------------------------

def test_generation_is_deterministic_and_thread_invariant():
    cfg = small_cfg()
    a = generate_dataset(cfg, 12, threads=1)
    b = generate_dataset(cfg, 12, threads=4)
    np.testing.assert_array_equal(a.vocabulary.entity_embeddings,
                                  b.vocabulary.entity_embeddings)
    for ea, eb in zip(a.examples, b.examples):
        assert ea.graph == eb.graph
        np.testing.assert_array_equal(ea.proposals.features, eb.proposals.features)
        np.testing.assert_array_equal(ea.proposals.boxes, eb.proposals.boxes)


def test_first_index_splits_one_stream():
    cfg = small_cfg()
    whole = generate_dataset(cfg, 10)
    tail = generate_dataset(cfg, 4, first_index=6)
    for ea, eb in zip(whole.examples[6:], tail.examples):
        assert ea.image_id == eb.image_id and ea.graph == eb.graph


def test_every_predicate_class_has_a_fixed_signature():
    cfg = small_cfg(predicate_range=(1, 2))
    sampler = SceneSampler(cfg)
    ds = generate_dataset(cfg, 40)
    for ex in ds.examples:
        g = ex.graph
        for k, cls in enumerate(g.predicates):
            args = g.arguments(k)
            want = sampler.signatures[len(args)][cls - 1]
            got = [g.entities[args[r]].class_index for r in range(len(args))]
            assert got == [int(c) for c in want]


def test_participant_classes_unique_per_scene():
    ds = generate_dataset(small_cfg(), 40)
    for ex in ds.examples:
        classes = [n.class_index for n in ex.graph.entities]
        assert len(set(classes)) == len(classes)
        assert BACKGROUND not in classes  # class 0 never appears as a node


def test_predicate_classes_never_repeat_within_a_scene():
    ds = generate_dataset(small_cfg(predicate_range=(2, 2)), 30)
    for ex in ds.examples:
        assert len(set(ex.graph.predicates)) == len(ex.graph.predicates)


def test_binary_world_converts_losslessly_to_triplets():
    ds = generate_dataset(small_cfg(), 30)
    for ex in ds.examples:
        sg, dropped = vsp_to_sgg(ex.graph)
        assert dropped == 0
        assert len(sg.triplets) == ex.graph.n_predicates


def test_unary_world_uses_only_the_subject_role():
    cfg = small_cfg(arity_weights=(1.0, 0.0, 0.0), entity_range=(1, 3),
                    n_roles=1)
    ds = generate_dataset(cfg, 20)
    assert any(ex.graph.n_predicates for ex in ds.examples)
    for ex in ds.examples:
        assert all(r == 0 for (_, _, r) in ex.graph.edges)


def test_geometry_stays_on_canvas_and_separated():
    cfg = small_cfg()
    ds = generate_dataset(cfg, 25)
    for ex in ds.examples:
        for n in ex.graph.entities:
            b = n.box
            assert 0.0 <= b.x_min < b.x_max <= cfg.canvas_width
            assert 0.0 <= b.y_min < b.y_max <= cfg.canvas_height
        for row in ex.proposals.boxes:
            assert 0.0 <= row[0] < row[2] <= cfg.canvas_width
            assert 0.0 <= row[1] < row[3] <= cfg.canvas_height


def test_proposal_counts_cover_entities_plus_distractors():
    cfg = small_cfg(distractor_range=(2, 2))
    ds = generate_dataset(cfg, 10)
    for ex in ds.examples:
        assert ex.proposals.count == ex.graph.n_entities + 2
        assert ex.gt_proposals.count == ex.graph.n_entities


def test_infeasible_layout_raises_generation_error():
    cfg = small_cfg(canvas_width=60.0, canvas_height=60.0,
                    box_size_range=(40.0, 50.0))
    with pytest.raises(GenerationError):
        generate_dataset(cfg, 1)


# -- noiseless realizability --------------------------------------------------

def clean_cfg():
    return small_cfg(feature_noise=0.0, box_jitter=0.0, distractor_range=(0, 0))


def test_noiseless_features_recover_classes_exactly():
    cfg = clean_cfg()
    ds = generate_dataset(cfg, 20)
    emb = ds.vocabulary.entity_embeddings
    for ex in ds.examples:
        # proposals are shuffled relative to the graph; match them by box
        gt_by_box = {tuple(np.float32(n.box.as_list())): n.class_index
                     for n in ex.graph.entities}
        for row, feat in zip(ex.proposals.boxes, ex.proposals.features):
            d = np.linalg.norm(emb - feat[: cfg.embedding_dim], axis=1)
            assert d.min() < 1e-5
            assert int(d.argmin()) == gt_by_box[tuple(row)]


def test_noiseless_gt_proposals_follow_graph_order():
    cfg = clean_cfg()
    ds = generate_dataset(cfg, 10)
    emb = ds.vocabulary.entity_embeddings
    for ex in ds.examples:
        for node, feat in zip(ex.graph.entities, ex.gt_proposals.features):
            d = np.linalg.norm(emb - feat[: cfg.embedding_dim], axis=1)
            assert int(d.argmin()) == node.class_index


def test_distractor_features_sit_near_background():
    cfg = small_cfg(distractor_range=(1, 1), feature_noise=0.05)
    ds = generate_dataset(cfg, 10)
    emb = ds.vocabulary.entity_embeddings
    for ex in ds.examples:
        votes = []
        for feat in ex.proposals.features:
            d = np.linalg.norm(emb - feat[: cfg.embedding_dim], axis=1)
            votes.append(int(d.argmin()))
        assert votes.count(0) == 1  # exactly the one distractor


def test_jittered_proposals_keep_overlap_floor():
    from vsparse.losses import iou
    cfg = small_cfg(box_jitter=4.0, jitter_iou_floor=0.6, distractor_range=(0, 0))
    ds = generate_dataset(cfg, 15)
    from vsparse.graphs import BBox
    for ex in ds.examples:
        for row in ex.proposals.boxes:
            cand = BBox(*[float(v) for v in row])
            best = max(iou(cand, n.box) for n in ex.graph.entities)
            assert best >= cfg.jitter_iou_floor - 1e-6


# -- dataset files ------------------------------------------------------------

def test_dataset_roundtrip_preserves_f32_bits(tmp_path):
    ds = generate_dataset(small_cfg(), 8)
    write_dataset(tmp_path / "d", ds)
    back = read_dataset(tmp_path / "d")
    assert back.config == ds.config
    assert back.vocabulary.entity_classes == ds.vocabulary.entity_classes
    for ea, eb in zip(ds.examples, back.examples):
        assert ea.graph == eb.graph
        assert ea.image_id == eb.image_id
        np.testing.assert_array_equal(ea.proposals.features, eb.proposals.features)
        np.testing.assert_array_equal(ea.proposals.boxes, eb.proposals.boxes)
        np.testing.assert_array_equal(ea.gt_proposals.features,
                                      eb.gt_proposals.features)


def test_empty_dataset_roundtrip(tmp_path):
    ds = generate_dataset(small_cfg(), 2)
    write_dataset(tmp_path / "d", Dataset(ds.vocabulary, [], ds.config))
    back = read_dataset(tmp_path / "d")
    assert back.examples == []


def test_hash_mismatch_detected(tmp_path):
    ds = generate_dataset(small_cfg(), 3)
    write_dataset(tmp_path / "d", ds)
    target = tmp_path / "d" / "features.bin"
    data = target.read_bytes()
    target.write_bytes(data[:-10] + b"tampering\n")
    with pytest.raises(FormatError, match="hash mismatch"):
        read_dataset(tmp_path / "d")
    # verification can be waived explicitly
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "d", verify_hashes=False)


def test_missing_manifest_and_bad_json(tmp_path):
    with pytest.raises(FormatError, match="missing manifest"):
        read_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(FormatError):
        read_dataset(tmp_path)


def test_example_count_mismatch_rejected(tmp_path):
    ds = generate_dataset(small_cfg(), 4)
    write_dataset(tmp_path / "d", ds)
    manifest_path = tmp_path / "d" / "manifest.json"
    doc = json.loads(manifest_path.read_text())
    doc["n_examples"] = 7
    del doc["hashes"]
    manifest_path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="promises 7"):
        read_dataset(tmp_path / "d")


def test_proposal_file_errors_name_line_and_offset(tmp_path):
    ds = generate_dataset(small_cfg(), 2)
    write_dataset(tmp_path / "d", ds)
    path = os.path.join(tmp_path, "d", "features.bin")
    lines = open(path, "rb").read().splitlines(keepends=True)

    bad = tmp_path / "bad.bin"
    bad.write_bytes(lines[0] + b'{"image_id": "x"}\n')
    with pytest.raises(FormatError, match="bad.bin:2") as info:
        read_proposal_file(bad)
    assert info.value.offset == len(lines[0])

    rec = json.loads(lines[0])
    rec["n_proposals"] += 1  # promises more rows than the blob holds
    short = tmp_path / "short.bin"
    short.write_text(json.dumps(rec) + "\n")
    with pytest.raises(FormatError, match="blob holds"):
        read_proposal_file(short)
