"""Synthetic scenes with a fully observable generative rule.

The world is a seeded rule book: every predicate class owns a signature,
a tuple of distinct participant classes, one per role (``on`` might take
subject ``object_c`` and object ``object_f``, always).  A scene is a
handful of spatial clusters on a canvas: each cluster hosts one
predicate instance whose participants are fresh entities of the
signature classes, and the remaining clusters hold context entities of
classes unused in the scene.  Predicate classes never repeat within a
scene and participant classes are scene-wide unique, so the graph is
recoverable from appearance alone — with zero feature noise, zero box
jitter and no distractors the mapping from proposals to graph is exact,
which is what makes weak supervision on this world a solvable problem.

Features imitate pooled detector activations: the class embedding
concatenated with the box encoding, plus white noise.  Distractor
proposals carry the background embedding.  Everything is deterministic
given the config seed; example streams are split per index so train and
test directories built from the same seed share one world.
"""

import base64
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .graphs import (BACKGROUND, BBox, EntityNode, VspGraph, Vocabulary,
                     load_vocabulary, read_graphs, save_vocabulary, write_graphs)
from .losses import iou
from .model import Proposals, box_encoding

_ROLE_NAMES = ("subject", "object", "instrument")


@dataclass(frozen=True)
class SynthConfig:
    n_entity_classes: int = 12          # including background
    n_predicate_classes: int = 8        # including background
    n_roles: int = 2
    embedding_dim: int = 48
    embedding_scale: float = 1.0
    canvas_width: float = 512.0
    canvas_height: float = 512.0
    entity_range: tuple = (3, 6)
    predicate_range: tuple = (1, 2)
    arity_weights: tuple = (0.0, 1.0, 0.0)
    box_size_range: tuple = (40.0, 100.0)
    cluster_spread: float = 40.0
    min_separation: float = 150.0
    feature_noise: float = 0.1
    box_jitter: float = 6.0
    jitter_iou_floor: float = 0.5
    distractor_range: tuple = (0, 2)
    seed: int = 0

    def __post_init__(self):
        if self.n_entity_classes < 2 or self.n_predicate_classes < 2:
            raise ConfigError("need at least one non-background class on each side")
        if not 1 <= self.n_roles <= len(_ROLE_NAMES):
            raise ConfigError(f"n_roles must be in [1, {len(_ROLE_NAMES)}]")
        if len(self.arity_weights) != 3 or min(self.arity_weights) < 0:
            raise ConfigError("arity_weights must be three nonnegative numbers")
        if sum(self.arity_weights) <= 0:
            raise ConfigError("arity_weights must not all be zero")
        for arity in range(self.n_roles + 1, 4):
            if self.arity_weights[arity - 1] > 0:
                raise ConfigError(f"arity {arity} needs {arity} roles, "
                                  f"config has {self.n_roles}")
        for arity in (1, 2, 3):
            if self.arity_weights[arity - 1] > 0 and arity > self.n_entity_classes - 1:
                raise ConfigError(f"arity {arity} signatures need {arity} distinct "
                                  f"entity classes, config has {self.n_entity_classes - 1}")
        if self.predicate_range[1] > self.n_predicate_classes - 1:
            raise ConfigError("a scene draws distinct predicate classes; "
                              "predicate_range exceeds the class count")
        if self.entity_range[0] > self.entity_range[1] or self.entity_range[0] < 1:
            raise ConfigError("bad entity_range")
        if self.predicate_range[0] > self.predicate_range[1] or self.predicate_range[0] < 0:
            raise ConfigError("bad predicate_range")
        if self.entity_range[1] < self.predicate_range[0]:
            raise ConfigError("entity_range cannot host predicate_range")
        if self.feature_noise < 0 or self.box_jitter < 0:
            raise ConfigError("noise levels must be nonnegative")
        if self.embedding_scale <= 0:
            raise ConfigError("embedding_scale must be positive")

    @property
    def feature_dim(self):
        return self.embedding_dim + 6


@dataclass(frozen=True, eq=False)
class Example:
    image_id: str
    width: float
    height: float
    proposals: Proposals
    gt_proposals: Proposals
    graph: VspGraph


@dataclass(frozen=True, eq=False)
class Dataset:
    vocabulary: Vocabulary
    examples: list
    config: SynthConfig | None = None


def _make_vocabulary(cfg, rng):
    ent = [BACKGROUND] + [f"object_{chr(ord('a') + i)}" for i in range(cfg.n_entity_classes - 1)]
    pred = [BACKGROUND] + [f"rel_{chr(ord('a') + i)}" for i in range(cfg.n_predicate_classes - 1)]
    roles = _ROLE_NAMES[:cfg.n_roles]
    # a wide spread keeps classes separable against feature noise
    return Vocabulary.create(ent, pred, roles, cfg.embedding_dim, rng,
                             scale=cfg.embedding_scale)


class SceneSampler:
    """Owns the world: vocabulary, embeddings and the per-predicate-class
    participant signatures, all derived from the config seed."""

    def __init__(self, cfg):
        self.cfg = cfg
        world_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
        self.vocabulary = _make_vocabulary(cfg, world_rng)
        n_real_ent = cfg.n_entity_classes - 1
        n_real_pred = cfg.n_predicate_classes - 1
        # signatures[arity][p - 1] lists the participant class per role (all
        # 1-based, background excluded); classes within a row are distinct so
        # role assignment is decided by class alone
        self.signatures = {}
        for arity in (1, 2, 3):
            if arity <= n_real_ent:
                rows = [1 + world_rng.choice(n_real_ent, size=arity, replace=False)
                        for _ in range(n_real_pred)]
                self.signatures[arity] = np.stack(rows)

    def example_rng(self, index):
        return np.random.default_rng(np.random.SeedSequence(self.cfg.seed, spawn_key=(1, index)))

    # -- geometry helpers ---------------------------------------------------

    def _sample_box(self, center_x, center_y, rng):
        cfg = self.cfg
        w = rng.uniform(*cfg.box_size_range)
        h = rng.uniform(*cfg.box_size_range)
        x0 = np.clip(center_x - w / 2.0, 0.0, cfg.canvas_width - w)
        y0 = np.clip(center_y - h / 2.0, 0.0, cfg.canvas_height - h)
        return BBox(float(x0), float(y0), float(x0 + w), float(y0 + h))

    def _cluster_centers(self, count, rng):
        """Rejection-sample `count` pairwise-separated centers; None on failure
        so the caller can redraw the whole scene."""
        cfg = self.cfg
        margin = cfg.cluster_spread + cfg.box_size_range[1] / 2.0
        lo_x, hi_x = margin, cfg.canvas_width - margin
        lo_y, hi_y = margin, cfg.canvas_height - margin
        if lo_x >= hi_x or lo_y >= hi_y:
            raise GenerationError("canvas too small for the configured box sizes")
        centers = []
        for _ in range(count):
            for _attempt in range(100):
                c = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
                if all(np.hypot(c[0] - o[0], c[1] - o[1]) >= cfg.min_separation
                       for o in centers):
                    centers.append(c)
                    break
            else:
                return None
        return centers

    def _jitter(self, box, rng):
        cfg = self.cfg
        if cfg.box_jitter == 0.0:
            return box
        for _ in range(60):
            d = rng.normal(0.0, cfg.box_jitter, size=4)
            cand = BBox(float(np.clip(box.x_min + d[0], 0.0, cfg.canvas_width - 1.0)),
                        float(np.clip(box.y_min + d[1], 0.0, cfg.canvas_height - 1.0)),
                        float(np.clip(box.x_max + d[2], 1.0, cfg.canvas_width)),
                        float(np.clip(box.y_max + d[3], 1.0, cfg.canvas_height)))
            if cand.is_valid() and iou(cand, box) >= cfg.jitter_iou_floor:
                return cand
        raise GenerationError("box jitter kept violating the overlap floor")

    def _feature(self, class_index, box, rng):
        cfg = self.cfg
        clean = np.concatenate([
            self.vocabulary.entity_embeddings[class_index],
            box_encoding(np.asarray([box.as_list()]), cfg.canvas_width, cfg.canvas_height)[0],
        ])
        if cfg.feature_noise > 0.0:
            clean = clean + rng.normal(0.0, cfg.feature_noise, size=clean.shape)
        return clean

    # -- scene construction -------------------------------------------------

    def scene(self, index):
        """Build example `index`: ground truth graph plus both proposal sets."""
        cfg = self.cfg
        rng = self.example_rng(index)
        n_real_ent = cfg.n_entity_classes - 1
        n_real_pred = cfg.n_predicate_classes - 1
        weights = np.asarray(cfg.arity_weights, dtype=np.float64)
        weights = weights / weights.sum()

        layout = None
        for _attempt in range(100):
            n_pred = int(rng.integers(cfg.predicate_range[0], cfg.predicate_range[1] + 1))
            pred_classes = [1 + int(p) for p in
                            rng.choice(n_real_pred, size=n_pred, replace=False)]
            arities = [int(rng.choice((1, 2, 3), p=weights)) for _ in range(n_pred)]
            rows = [self.signatures[a][p - 1] for a, p in zip(arities, pred_classes)]
            used = [int(c) for row in rows for c in row]
            # participant classes must be unique scene-wide, or appearance
            # alone could not tell the role edges apart
            if len(set(used)) != len(used) or len(used) > cfg.entity_range[1]:
                continue
            spare = [c for c in range(1, n_real_ent + 1) if c not in used]
            free_lo = max(0, cfg.entity_range[0] - len(used))
            free_hi = min(max(free_lo, cfg.entity_range[1] - len(used)), len(spare))
            if free_lo > free_hi:
                continue
            n_free = int(rng.integers(free_lo, free_hi + 1))
            centers = self._cluster_centers(n_pred + n_free, rng)
            if centers is not None:
                layout = (pred_classes, rows, spare, n_free, centers)
                break
        if layout is None:
            raise GenerationError("could not lay out a scene after 100 attempts; "
                                  "loosen separation or shrink counts")
        pred_classes, rows, spare, n_free, centers = layout

        entities = []          # (class_index, BBox)
        cluster_members = []   # entity indices per predicate cluster
        for row, (cx, cy) in zip(rows, centers[:len(pred_classes)]):
            members = []
            for cls in row:
                ox, oy = rng.uniform(-cfg.cluster_spread, cfg.cluster_spread, size=2)
                members.append(len(entities))
                entities.append((int(cls), self._sample_box(cx + ox, cy + oy, rng)))
            cluster_members.append(members)
        picks = rng.choice(len(spare), size=n_free, replace=False) if n_free else []
        for j, (cx, cy) in zip(picks, centers[len(pred_classes):]):
            entities.append((spare[int(j)], self._sample_box(cx, cy, rng)))

        order = rng.permutation(len(entities))
        remap = {int(old): new for new, old in enumerate(order)}
        nodes = tuple(EntityNode(entities[int(old)][0], entities[int(old)][1])
                      for old in order)

        edges = set()
        for k, members in enumerate(cluster_members):
            for role, i in enumerate(members):
                edges.add((k, remap[i], role))
        graph = VspGraph(nodes, tuple(pred_classes), frozenset(edges))

        gt_boxes = np.asarray([n.box.as_list() for n in nodes], dtype=np.float64)
        gt_feats = np.stack([self._feature(n.class_index, n.box, rng) for n in nodes])

        prop_entries = []
        for n in nodes:
            jittered = self._jitter(n.box, rng)
            prop_entries.append((jittered, self._feature(n.class_index, jittered, rng)))
        n_distract = int(rng.integers(cfg.distractor_range[0], cfg.distractor_range[1] + 1))
        for _ in range(n_distract):
            cx = rng.uniform(0.0, cfg.canvas_width)
            cy = rng.uniform(0.0, cfg.canvas_height)
            box = self._sample_box(cx, cy, rng)
            prop_entries.append((box, self._feature(self.vocabulary.background_entity, box, rng)))
        shuffle = rng.permutation(len(prop_entries))
        prop_boxes = np.asarray([prop_entries[i][0].as_list() for i in shuffle])
        prop_feats = np.stack([prop_entries[i][1] for i in shuffle])

        return Example(
            image_id=f"scene_{index:06d}",
            width=cfg.canvas_width,
            height=cfg.canvas_height,
            proposals=Proposals(prop_boxes.astype(np.float32),
                                prop_feats.astype(np.float32)),
            gt_proposals=Proposals(gt_boxes.astype(np.float32),
                                   gt_feats.astype(np.float32)),
            graph=graph,
        )


def generate_dataset(cfg, count, first_index=0, threads=1):
    """Build `count` scenes; each derives its RNG from its global index,
    so the result is identical for any thread count or split boundary."""
    sampler = SceneSampler(cfg)
    indices = range(first_index, first_index + count)
    if threads and threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            examples = list(pool.map(sampler.scene, indices))
    else:
        examples = [sampler.scene(i) for i in indices]
    return Dataset(sampler.vocabulary, examples, cfg)


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

def _write_proposal_file(path, examples, which):
    """One JSON record per line: sizes, then base64 little-endian f32 blobs."""
    with open(path, "w") as fh:
        for ex in examples:
            props = getattr(ex, which)
            rec = {
                "image_id": ex.image_id,
                "width": ex.width,
                "height": ex.height,
                "n_proposals": int(props.count),
                "feature_dim": int(props.features.shape[1]),
                "features": base64.b64encode(
                    np.ascontiguousarray(props.features, dtype="<f4").tobytes()).decode(),
                "boxes": base64.b64encode(
                    np.ascontiguousarray(props.boxes, dtype="<f4").tobytes()).decode(),
            }
            fh.write(json.dumps(rec))
            fh.write("\n")


def read_proposal_file(path):
    """Returns a list of (image_id, width, height, Proposals)."""
    out = []
    offset = 0
    with open(path, "rb") as fh:
        for line_no, raw in enumerate(fh, start=1):
            stripped = raw.strip()
            if stripped:
                try:
                    rec = json.loads(stripped.decode("utf-8"))
                    n = int(rec["n_proposals"])
                    d = int(rec["feature_dim"])
                    feats = np.frombuffer(base64.b64decode(rec["features"]), dtype="<f4")
                    boxes = np.frombuffer(base64.b64decode(rec["boxes"]), dtype="<f4")
                except (json.JSONDecodeError, UnicodeDecodeError, KeyError, ValueError) as exc:
                    raise FormatError(f"{path}:{line_no}: {exc}", offset=offset) from exc
                if feats.size != n * d:
                    raise FormatError(f"{path}:{line_no}: feature blob holds {feats.size} "
                                      f"values for {n}x{d}", offset=offset)
                if boxes.size != n * 4:
                    raise FormatError(f"{path}:{line_no}: box blob holds {boxes.size} "
                                      f"values for {n} boxes", offset=offset)
                props = Proposals(boxes.reshape(n, 4).copy(), feats.reshape(n, d).copy())
                out.append((rec["image_id"], float(rec["width"]), float(rec["height"]), props))
            offset += len(raw)
    return out


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_dataset(directory, dataset):
    """Layout: vocab.json, graphs.jsonl, features.bin, gt_features.bin and a
    manifest carrying counts and content hashes."""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "vocab.json": None,
        "graphs.jsonl": None,
        "features.bin": None,
        "gt_features.bin": None,
    }
    save_vocabulary(os.path.join(directory, "vocab.json"), dataset.vocabulary)
    write_graphs(os.path.join(directory, "graphs.jsonl"),
                 [ex.graph for ex in dataset.examples], dataset.vocabulary)
    _write_proposal_file(os.path.join(directory, "features.bin"),
                         dataset.examples, "proposals")
    _write_proposal_file(os.path.join(directory, "gt_features.bin"),
                         dataset.examples, "gt_proposals")
    manifest = {
        "n_examples": len(dataset.examples),
        "n_entity_classes": dataset.vocabulary.n_entity_classes,
        "n_predicate_classes": dataset.vocabulary.n_predicate_classes,
        "n_roles": dataset.vocabulary.n_roles,
        "hashes": {name: _sha256(os.path.join(directory, name)) for name in paths},
    }
    if dataset.config is not None:
        manifest["synth_config"] = config_to_dict(dataset.config)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def read_dataset(directory, verify_hashes=True):
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{manifest_path}: missing manifest") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc
    if verify_hashes:
        for name, expect in manifest.get("hashes", {}).items():
            actual = _sha256(os.path.join(directory, name))
            if actual != expect:
                raise FormatError(f"{directory}/{name}: hash mismatch "
                                  f"(expected {expect[:12]}..., got {actual[:12]}...)")
    vocab = load_vocabulary(os.path.join(directory, "vocab.json"))
    graphs = read_graphs(os.path.join(directory, "graphs.jsonl"), vocab)
    proposals = read_proposal_file(os.path.join(directory, "features.bin"))
    gt_proposals = read_proposal_file(os.path.join(directory, "gt_features.bin"))
    n = manifest.get("n_examples", len(graphs))
    if not (len(graphs) == len(proposals) == len(gt_proposals) == n):
        raise FormatError(f"{directory}: manifest promises {n} examples, files hold "
                          f"{len(graphs)}/{len(proposals)}/{len(gt_proposals)}")
    examples = []
    for g, (image_id, width, height, props), (_, _, _, gt_props) in zip(
            graphs, proposals, gt_proposals):
        examples.append(Example(image_id, width, height, props, gt_props, g))
    cfg = None
    if "synth_config" in manifest:
        cfg = config_from_dict(manifest["synth_config"])
    return Dataset(vocab, examples, cfg)


def config_to_dict(cfg):
    return {
        "n_entity_classes": cfg.n_entity_classes,
        "n_predicate_classes": cfg.n_predicate_classes,
        "n_roles": cfg.n_roles,
        "embedding_dim": cfg.embedding_dim,
        "embedding_scale": cfg.embedding_scale,
        "canvas_width": cfg.canvas_width,
        "canvas_height": cfg.canvas_height,
        "entity_range": list(cfg.entity_range),
        "predicate_range": list(cfg.predicate_range),
        "arity_weights": list(cfg.arity_weights),
        "box_size_range": list(cfg.box_size_range),
        "cluster_spread": cfg.cluster_spread,
        "min_separation": cfg.min_separation,
        "feature_noise": cfg.feature_noise,
        "box_jitter": cfg.box_jitter,
        "jitter_iou_floor": cfg.jitter_iou_floor,
        "distractor_range": list(cfg.distractor_range),
        "seed": cfg.seed,
    }


def config_from_dict(doc):
    doc = dict(doc)
    known = set(config_to_dict(SynthConfig()))
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    for key in ("entity_range", "predicate_range", "arity_weights",
                "box_size_range", "distractor_range"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return SynthConfig(**doc)
