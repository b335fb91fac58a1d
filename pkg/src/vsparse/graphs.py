"""Graph data model: scene graphs, role-labeled bipartite graphs and their
soft (embedded) form, plus the JSON file formats for graphs and vocabularies.

A VspGraph is bipartite: entity nodes on one side, predicate nodes on the
other, and every edge carries a role label.  A SceneGraph is the familiar
(subject, predicate, object) triplet list; converting to the bipartite form
gives one predicate node per triplet with a subject edge and an object edge,
so the two views are interchangeable when the only roles are subject/object.
"""

import base64
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, UsageError

BACKGROUND = "__background__"
SUBJECT = "subject"
OBJECT = "object"
INSTRUMENT = "instrument"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, corner form, x_min < x_max and y_min < y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    def is_valid(self):
        return self.x_min < self.x_max and self.y_min < self.y_max

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values):
        if len(values) != 4:
            raise FormatError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*[float(v) for v in values])


def union_box(a, b):
    """Smallest box enclosing both."""
    return BBox(min(a.x_min, b.x_min), min(a.y_min, b.y_min),
                max(a.x_max, b.x_max), max(a.y_max, b.y_max))


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Class lists for entities, predicates and roles, plus class embeddings.

    Index 0 of the entity and predicate lists is the reserved background
    class.  Embeddings are one row per class and may be None when only the
    symbolic structure is needed.
    """

    entity_classes: tuple
    predicate_classes: tuple
    role_classes: tuple
    entity_embeddings: np.ndarray | None = None
    predicate_embeddings: np.ndarray | None = None
    background_entity: int = 0
    background_predicate: int = 0

    def __post_init__(self):
        for kind, names in (("entity", self.entity_classes),
                            ("predicate", self.predicate_classes),
                            ("role", self.role_classes)):
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate {kind} class names")
        if not self.role_classes:
            raise ConfigError("at least one role class is required")
        for name, emb, count in (("entity", self.entity_embeddings, len(self.entity_classes)),
                                 ("predicate", self.predicate_embeddings, len(self.predicate_classes))):
            if emb is not None and emb.shape[0] != count:
                raise ConfigError(f"{name} embeddings have {emb.shape[0]} rows for {count} classes")
        if (self.entity_embeddings is not None and self.predicate_embeddings is not None
                and self.entity_embeddings.shape[1] != self.predicate_embeddings.shape[1]):
            raise ConfigError("entity and predicate embedding widths differ")

    @property
    def n_entity_classes(self):
        return len(self.entity_classes)

    @property
    def n_predicate_classes(self):
        return len(self.predicate_classes)

    @property
    def n_roles(self):
        return len(self.role_classes)

    @property
    def embedding_dim(self):
        if self.entity_embeddings is None:
            raise UsageError("vocabulary has no embeddings")
        return self.entity_embeddings.shape[1]

    def role_index(self, name):
        try:
            return self.role_classes.index(name)
        except ValueError:
            raise ConfigError(f"unknown role '{name}'") from None

    def entity_index(self, name):
        try:
            return self.entity_classes.index(name)
        except ValueError:
            raise FormatError(f"unknown entity class '{name}'") from None

    def predicate_index(self, name):
        try:
            return self.predicate_classes.index(name)
        except ValueError:
            raise FormatError(f"unknown predicate class '{name}'") from None

    def with_embeddings(self, entity_embeddings, predicate_embeddings):
        return replace(self, entity_embeddings=np.asarray(entity_embeddings, dtype=np.float64),
                       predicate_embeddings=np.asarray(predicate_embeddings, dtype=np.float64))

    @classmethod
    def create(cls, entity_classes, predicate_classes, role_classes,
               embedding_dim, rng=None, scale=0.1):
        """Random class embeddings, uniform in [-scale, scale]."""
        entity_classes = tuple(entity_classes)
        predicate_classes = tuple(predicate_classes)
        role_classes = tuple(role_classes)
        if rng is None:
            rng = np.random.default_rng(0)
        ent = rng.uniform(-scale, scale, size=(len(entity_classes), embedding_dim))
        pred = rng.uniform(-scale, scale, size=(len(predicate_classes), embedding_dim))
        return cls(entity_classes, predicate_classes, role_classes, ent, pred)


@dataclass(frozen=True)
class EntityNode:
    class_index: int
    box: BBox | None = None


@dataclass(frozen=True)
class VspGraph:
    """Bipartite graph: predicate k --role r--> entity i edges as (k, i, r)."""

    entities: tuple
    predicates: tuple
    edges: frozenset

    @property
    def n_entities(self):
        return len(self.entities)

    @property
    def n_predicates(self):
        return len(self.predicates)

    def arguments(self, k):
        """role index -> entity index for predicate k."""
        return {r: i for (kk, i, r) in self.edges if kk == k}

    def boxes(self):
        return [e.box for e in self.entities]


@dataclass(frozen=True)
class Triplet:
    subject: int
    predicate: int
    object: int
    score: float | None = None


@dataclass(frozen=True)
class SceneGraph:
    entities: tuple
    triplets: tuple


@dataclass(frozen=True, eq=False)
class SoftGraph:
    """Continuous graph: embedding rows per node and a dense role tensor.

    attention has shape [n_roles, n_predicates, n_entities]; a discrete
    graph encodes as exact zeros and ones, a model output lands strictly
    inside (0, 1).
    """

    entity_embeddings: np.ndarray
    predicate_embeddings: np.ndarray
    attention: np.ndarray
    boxes: tuple | None = None

    def __post_init__(self):
        n_p, n_e = self.predicate_embeddings.shape[0], self.entity_embeddings.shape[0]
        if self.attention.ndim != 3 or self.attention.shape[1:] != (n_p, n_e):
            raise ShapeError(f"attention shape {self.attention.shape} does not match "
                             f"{n_p} predicates x {n_e} entities")
        if self.boxes is not None and len(self.boxes) != n_e:
            raise ShapeError("one box per entity required")

    @property
    def n_entities(self):
        return self.entity_embeddings.shape[0]

    @property
    def n_predicates(self):
        return self.predicate_embeddings.shape[0]

    @property
    def n_roles(self):
        return self.attention.shape[0]


@dataclass(frozen=True)
class RankedTriplet:
    """A scored (subject, predicate, object) prediction with boxes attached."""

    subject_class: int
    subject_box: BBox | None
    predicate_class: int
    object_class: int
    object_box: BBox | None
    score: float | None = None
    predicate_node: int = -1


# ---------------------------------------------------------------------------
# validation and conversions
# ---------------------------------------------------------------------------

def validate(g, vocab=None):
    """Return a list of invariant violations (empty means the graph is well formed)."""
    problems = []
    n_e, n_p = g.n_entities, g.n_predicates
    for k, i, r in g.edges:
        if not 0 <= k < n_p:
            problems.append(f"edge ({k},{i},{r}): predicate index {k} out of range")
        if not 0 <= i < n_e:
            problems.append(f"edge ({k},{i},{r}): entity index {i} out of range")
        if vocab is not None and not 0 <= r < vocab.n_roles:
            problems.append(f"edge ({k},{i},{r}): role index {r} out of range")
    pair_roles = {}
    role_targets = {}
    for k, i, r in g.edges:
        pair_roles.setdefault((k, i), []).append(r)
        role_targets.setdefault((k, r), []).append(i)
    for (k, i), roles in pair_roles.items():
        if len(roles) > 1:
            problems.append(f"predicate {k} has {len(roles)} roles for entity {i}")
    for (k, r), targets in role_targets.items():
        if len(targets) > 1:
            problems.append(f"predicate {k} fills role {r} with {len(targets)} entities")
    if vocab is not None:
        for i, ent in enumerate(g.entities):
            if not 0 <= ent.class_index < vocab.n_entity_classes:
                problems.append(f"entity {i}: class index {ent.class_index} out of range")
        for k, cls in enumerate(g.predicates):
            if not 0 <= cls < vocab.n_predicate_classes:
                problems.append(f"predicate {k}: class index {cls} out of range")
    return problems


def sgg_to_vsp(g, vocab, allow_self_relations=False):
    """One predicate node per triplet, with subject and object role edges.

    Duplicate triplets stay distinct nodes on purpose: a scene can contain
    the same relationship twice.
    """
    subj = vocab.role_index(SUBJECT)
    obj = vocab.role_index(OBJECT)
    edges = set()
    predicates = []
    for k, t in enumerate(g.triplets):
        if not 0 <= t.subject < len(g.entities) or not 0 <= t.object < len(g.entities):
            raise UsageError(f"triplet {k} references a missing entity")
        if t.subject == t.object and not allow_self_relations:
            raise UsageError(f"triplet {k} relates entity {t.subject} to itself")
        predicates.append(t.predicate)
        edges.add((k, t.subject, subj))
        edges.add((k, t.object, obj))
    return VspGraph(tuple(g.entities), tuple(predicates), frozenset(edges))


def vsp_to_sgg(g, subject_role=0, object_role=1):
    """Extract triplets; predicates lacking either a subject or an object are
    dropped and counted.  Extra roles (e.g. instrument) are ignored.
    """
    triplets = []
    dropped = 0
    for k in range(g.n_predicates):
        args = g.arguments(k)
        if subject_role in args and object_role in args:
            triplets.append(Triplet(args[subject_role], g.predicates[k], args[object_role]))
        else:
            dropped += 1
    return SceneGraph(tuple(g.entities), tuple(triplets)), dropped


def encode_soft(g, vocab):
    """Lift a discrete graph into embedding space with a binary role tensor."""
    if vocab.entity_embeddings is None or vocab.predicate_embeddings is None:
        raise UsageError("encode_soft needs a vocabulary with embeddings")
    dim = vocab.embedding_dim
    ent = np.zeros((g.n_entities, dim))
    for i, node in enumerate(g.entities):
        ent[i] = vocab.entity_embeddings[node.class_index]
    pred = np.zeros((g.n_predicates, dim))
    for k, cls in enumerate(g.predicates):
        pred[k] = vocab.predicate_embeddings[cls]
    attention = np.zeros((vocab.n_roles, g.n_predicates, g.n_entities))
    for k, i, r in g.edges:
        attention[r, k, i] = 1.0
    boxes = tuple(e.box for e in g.entities)
    if all(b is None for b in boxes):
        boxes = None
    return SoftGraph(ent, pred, attention, boxes)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _b64_f32(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _from_b64_f32(text, expect_count, what):
    raw = base64.b64decode(text.encode("ascii"))
    if len(raw) != expect_count * 4:
        raise FormatError(f"{what}: expected {expect_count * 4} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def save_vocabulary(path, vocab):
    doc = {
        "entity_classes": list(vocab.entity_classes),
        "predicate_classes": list(vocab.predicate_classes),
        "role_classes": list(vocab.role_classes),
    }
    if vocab.entity_embeddings is not None:
        stackd = np.concatenate([vocab.entity_embeddings, vocab.predicate_embeddings], axis=0)
        doc["embedding_dim"] = int(stackd.shape[1])
        doc["embeddings"] = _b64_f32(stackd)
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_vocabulary(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    for key in ("entity_classes", "predicate_classes", "role_classes"):
        if key not in doc:
            raise FormatError(f"{path}: missing '{key}'")
    ent_names = tuple(doc["entity_classes"])
    pred_names = tuple(doc["predicate_classes"])
    roles = tuple(doc["role_classes"])
    ent_emb = pred_emb = None
    if "embeddings" in doc:
        dim = int(doc["embedding_dim"])
        total = len(ent_names) + len(pred_names)
        flat = _from_b64_f32(doc["embeddings"], total * dim, f"{path}: embeddings")
        stackd = flat.reshape(total, dim)
        ent_emb = stackd[:len(ent_names)].copy()
        pred_emb = stackd[len(ent_names):].copy()
    return Vocabulary(ent_names, pred_names, roles, ent_emb, pred_emb)


def _graph_to_doc(g, vocab):
    entities = []
    for e in g.entities:
        entities.append({
            "class": vocab.entity_classes[e.class_index],
            "box": None if e.box is None else e.box.as_list(),
        })
    predicates = []
    for k, cls in enumerate(g.predicates):
        roles = {vocab.role_classes[r]: i for (kk, i, r) in g.edges if kk == k}
        predicates.append({"class": vocab.predicate_classes[cls], "roles": roles})
    return {"entities": entities, "predicates": predicates}


def _graph_from_doc(doc, vocab, where):
    try:
        entities = []
        for e in doc["entities"]:
            box = None if e.get("box") is None else BBox.from_list(e["box"])
            entities.append(EntityNode(vocab.entity_index(e["class"]), box))
        predicates = []
        edges = set()
        for k, p in enumerate(doc["predicates"]):
            predicates.append(vocab.predicate_index(p["class"]))
            for role_name, i in p.get("roles", {}).items():
                edges.add((k, int(i), vocab.role_index(role_name)))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{where}: malformed graph record ({exc})") from exc
    g = VspGraph(tuple(entities), tuple(predicates), frozenset(edges))
    problems = validate(g, vocab)
    if problems:
        raise FormatError(f"{where}: {problems[0]}")
    return g


def write_graphs(path, graphs, vocab):
    """One JSON object per line; classes stored by name."""
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(_graph_to_doc(g, vocab)))
            fh.write("\n")


def read_graphs(path, vocab):
    graphs = []
    offset = 0
    with open(path, "rb") as fh:
        for line_no, raw in enumerate(fh, start=1):
            stripped = raw.strip()
            if stripped:
                try:
                    doc = json.loads(stripped.decode("utf-8"))
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    raise FormatError(f"{path}:{line_no}: {exc}", offset=offset) from exc
                graphs.append(_graph_from_doc(doc, vocab, f"{path}:{line_no}"))
            offset += len(raw)
    return graphs


def scene_graph_to_doc(g, vocab):
    entities = [{"class": vocab.entity_classes[e.class_index],
                 "box": None if e.box is None else e.box.as_list()} for e in g.entities]
    triplets = []
    for t in g.triplets:
        doc = {"subject": t.subject, "predicate": vocab.predicate_classes[t.predicate],
               "object": t.object}
        if t.score is not None:
            doc["score"] = t.score
        triplets.append(doc)
    return {"entities": entities, "triplets": triplets}


def scene_graph_from_doc(doc, vocab, where="scene graph"):
    try:
        entities = []
        for e in doc["entities"]:
            box = None if e.get("box") is None else BBox.from_list(e["box"])
            entities.append(EntityNode(vocab.entity_index(e["class"]), box))
        triplets = []
        for t in doc["triplets"]:
            triplets.append(Triplet(int(t["subject"]), vocab.predicate_index(t["predicate"]),
                                    int(t["object"]), t.get("score")))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{where}: malformed scene graph record ({exc})") from exc
    return SceneGraph(tuple(entities), tuple(triplets))
