"""Bipartite message-passing model over proposals and predicate slots.

The graph has one entity node per box proposal and a fixed pool of
predicate nodes whose initial states are a trained matrix, identical for
every image.  Each round recomputes a role-factored soft adjacency from
the current states (per-role query/key nets, then two softmax
normalizations sharing a null-attention mass in their denominators),
pushes pooled messages both ways through shared send/receive nets with
per-role pooling nets, and updates both sides with independent gated
recurrent cells.  After the last round the adjacency is recomputed once
more from the final states and returned together with linear projections
of the states into the class-embedding space.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError, UsageError
from .graphs import BBox, EntityNode, RankedTriplet, SoftGraph, VspGraph

BOX_ENCODING_DIM = 6


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    n_roles: int = 2
    n_predicates: int = 100
    entity_state_dim: int = 1024
    predicate_state_dim: int = 1024
    embedding_dim: int = 300
    key_dim: int | None = None
    mp_iterations: int = 3
    p_null: float = 1.0
    edge_threshold: float = 0.5

    def __post_init__(self):
        for name in ("feature_dim", "n_roles", "n_predicates", "entity_state_dim",
                     "predicate_state_dim", "embedding_dim", "mp_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.p_null < 0:
            raise ConfigError("p_null must be nonnegative")
        if not 0.0 <= self.edge_threshold <= 1.0:
            raise ConfigError("edge_threshold must lie in [0, 1]")

    @property
    def attention_dim(self):
        return self.key_dim if self.key_dim is not None else self.entity_state_dim


@dataclass(frozen=True, eq=False)
class Proposals:
    """Per-image detector output: boxes [n, 4] and pooled features [n, d]."""

    boxes: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ShapeError(f"boxes must be [n, 4], got {self.boxes.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.boxes.shape[0]:
            raise ShapeError("one feature row per box required")

    @property
    def count(self):
        return self.boxes.shape[0]


@dataclass(frozen=True, eq=False)
class ForwardResult:
    """Model output with the tape still attached (tensors, not arrays)."""

    entity_embeddings: ad.Tensor
    predicate_embeddings: ad.Tensor
    attention: ad.Tensor
    boxes: tuple

    def soft(self):
        """Detach into a plain numpy SoftGraph."""
        return SoftGraph(self.entity_embeddings.values.copy(),
                         self.predicate_embeddings.values.copy(),
                         self.attention.values.copy(),
                         self.boxes)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _register_mlp(store, prefix, dims, rng):
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        store.add(f"{prefix}/w{i}", w)
        store.add(f"{prefix}/b{i}", np.zeros(fan_out))


def mlp_params(store, prefix):
    layers = []
    i = 0
    while f"{prefix}/w{i}" in store:
        layers.append((store[f"{prefix}/w{i}"], store[f"{prefix}/b{i}"]))
        i += 1
    if not layers:
        raise UsageError(f"no layers registered under '{prefix}'")
    return layers


def _register_gru(store, prefix, state_dim, rng):
    for gate in ("reset", "update", "candidate"):
        scale = np.sqrt(1.0 / state_dim)
        store.add(f"{prefix}/{gate}/wx", rng.normal(0.0, scale, size=(state_dim, state_dim)))
        store.add(f"{prefix}/{gate}/wh", rng.normal(0.0, scale, size=(state_dim, state_dim)))
        store.add(f"{prefix}/{gate}/b", np.zeros(state_dim))


def build_params(config, vocab, rng):
    """Create every trainable tensor, seeded; class embeddings come from the
    vocabulary when it has them, otherwise uniform in [-0.1, 0.1]."""
    if vocab.n_roles != config.n_roles:
        raise ConfigError(f"config expects {config.n_roles} roles, "
                          f"vocabulary defines {vocab.n_roles}")
    d_e, d_p, d_k = config.entity_state_dim, config.predicate_state_dim, config.attention_dim
    emb = config.embedding_dim
    store = ad.ParamStore()
    _register_mlp(store, "init/appearance", (config.feature_dim, d_e, d_e), rng)
    _register_mlp(store, "init/box", (BOX_ENCODING_DIM, d_e, d_e), rng)
    for r in range(config.n_roles):
        _register_mlp(store, f"attn/role{r}/query", (d_p, d_p, d_k), rng)
        _register_mlp(store, f"attn/role{r}/key", (d_e, d_e, d_k), rng)
        _register_mlp(store, f"msg/to_pred/pool{r}", (d_e, d_e, d_p), rng)
        _register_mlp(store, f"msg/to_ent/pool{r}", (d_p, d_p, d_e), rng)
    _register_mlp(store, "msg/to_pred/send", (d_e, d_e, d_e), rng)
    _register_mlp(store, "msg/to_pred/recv", (d_p, d_p, d_p), rng)
    _register_mlp(store, "msg/to_ent/send", (d_p, d_p, d_p), rng)
    _register_mlp(store, "msg/to_ent/recv", (d_e, d_e, d_e), rng)
    _register_gru(store, "gru/entity", d_e, rng)
    _register_gru(store, "gru/predicate", d_p, rng)
    _register_mlp(store, "head/entity", (d_e, emb), rng)
    _register_mlp(store, "head/predicate", (d_p, emb), rng)
    store.add("state/predicate_init", rng.normal(0.0, 1.0, size=(config.n_predicates, d_p)))

    if vocab.entity_embeddings is not None:
        if vocab.embedding_dim != emb:
            raise ConfigError(f"vocabulary embeddings are {vocab.embedding_dim}-dim, "
                              f"config expects {emb}")
        store.add("embed/entity", vocab.entity_embeddings)
        store.add("embed/predicate", vocab.predicate_embeddings)
    else:
        store.add("embed/entity", rng.uniform(-0.1, 0.1, (vocab.n_entity_classes, emb)))
        store.add("embed/predicate", rng.uniform(-0.1, 0.1, (vocab.n_predicate_classes, emb)))
    return store


def vocab_with_current_embeddings(vocab, params):
    """Vocabulary view whose embeddings track the trained values."""
    return vocab.with_embeddings(params["embed/entity"].values.copy(),
                                 params["embed/predicate"].values.copy())


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def box_encoding(boxes, width, height):
    """Six relative coordinates per box: corners, then width and height."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if width <= 0 or height <= 0:
        raise UsageError("image size must be positive")
    enc = np.empty((boxes.shape[0], BOX_ENCODING_DIM))
    enc[:, 0] = boxes[:, 0] / width
    enc[:, 1] = boxes[:, 1] / height
    enc[:, 2] = boxes[:, 2] / width
    enc[:, 3] = boxes[:, 3] / height
    enc[:, 4] = (boxes[:, 2] - boxes[:, 0]) / width
    enc[:, 5] = (boxes[:, 3] - boxes[:, 1]) / height
    return enc


def init_entity_states(proposals, image_size, params, config):
    """Sum of the appearance and box-geometry encodings."""
    if proposals.features.shape[1] != config.feature_dim:
        raise ShapeError(f"features are {proposals.features.shape[1]}-dim, "
                         f"config expects {config.feature_dim}")
    width, height = image_size
    appearance = ad.mlp_forward(ad.constant(proposals.features),
                                mlp_params(params, "init/appearance"))
    geometry = ad.mlp_forward(ad.constant(box_encoding(proposals.boxes, width, height)),
                              mlp_params(params, "init/box"))
    return ad.add(appearance, geometry)


def init_predicate_states(params):
    return params["state/predicate_init"]


def role_attention(pred_states, ent_states, params, config):
    """Raw per-role compatibilities: query(pred) . key(entity), stacked to
    [n_roles, n_predicates, n_entities]."""
    slices = []
    for r in range(config.n_roles):
        q = ad.mlp_forward(pred_states, mlp_params(params, f"attn/role{r}/query"))
        k = ad.mlp_forward(ent_states, mlp_params(params, f"attn/role{r}/key"))
        slices.append(ad.matmul(q, ad.transpose(k)))
    return ad.stack(slices)


def normalize_attention(logits, p_null):
    """Product of two softmaxes with a shared null mass in each denominator:
    one competes across roles for a fixed (predicate, entity) pair, the other
    across entities for a fixed (predicate, role)."""
    across_roles = ad.softmax_extra(logits, axis=0, extra_mass=p_null)
    across_entities = ad.softmax_extra(logits, axis=2, extra_mass=p_null)
    return ad.mul(across_roles, across_entities)


def aggregate_to_predicates(attention, ent_states, params, config):
    """Attention-weighted pooling of entity messages into each predicate node."""
    sent = ad.mlp_forward(ent_states, mlp_params(params, "msg/to_pred/send"))
    total = None
    for r in range(config.n_roles):
        pooled = ad.matmul(ad.index_axis0(attention, r), sent)
        routed = ad.mlp_forward(pooled, mlp_params(params, f"msg/to_pred/pool{r}"))
        total = routed if total is None else ad.add(total, routed)
    return ad.mlp_forward(total, mlp_params(params, "msg/to_pred/recv"))


def aggregate_to_entities(attention, pred_states, params, config):
    sent = ad.mlp_forward(pred_states, mlp_params(params, "msg/to_ent/send"))
    total = None
    for r in range(config.n_roles):
        pooled = ad.matmul(ad.transpose(ad.index_axis0(attention, r)), sent)
        routed = ad.mlp_forward(pooled, mlp_params(params, f"msg/to_ent/pool{r}"))
        total = routed if total is None else ad.add(total, routed)
    return ad.mlp_forward(total, mlp_params(params, "msg/to_ent/recv"))


def gru_update(states, messages, params, prefix):
    """Standard gated recurrent cell applied row-wise; the message is the input."""
    if states.shape != messages.shape:
        raise ShapeError(f"gru_update: {states.shape} vs {messages.shape}")

    def gate(name, activation, hidden):
        pre = ad.add(ad.matmul(messages, params[f"{prefix}/{name}/wx"]),
                     ad.matmul(hidden, params[f"{prefix}/{name}/wh"]))
        pre = ad.add_row_bias(pre, params[f"{prefix}/{name}/b"])
        return activation(pre)

    reset = gate("reset", ad.sigmoid, states)
    update = gate("update", ad.sigmoid, states)
    candidate = gate("candidate", ad.tanh, ad.mul(reset, states))
    keep = ad.add_const(ad.scale(update, -1.0), 1.0)
    return ad.add(ad.mul(keep, states), ad.mul(update, candidate))


def forward(proposals, image_size, params, config):
    """Full pass: init, mp_iterations rounds of attention/messages/updates,
    then one final attention read-out plus the two embedding heads."""
    ent_states = init_entity_states(proposals, image_size, params, config)
    pred_states = init_predicate_states(params)
    for _ in range(config.mp_iterations):
        attention = normalize_attention(
            role_attention(pred_states, ent_states, params, config), config.p_null)
        to_pred = aggregate_to_predicates(attention, ent_states, params, config)
        to_ent = aggregate_to_entities(attention, pred_states, params, config)
        ent_states = gru_update(ent_states, to_ent, params, "gru/entity")
        pred_states = gru_update(pred_states, to_pred, params, "gru/predicate")
    attention = normalize_attention(
        role_attention(pred_states, ent_states, params, config), config.p_null)
    ent_out = ad.mlp_forward(ent_states, mlp_params(params, "head/entity"), activation="none")
    pred_out = ad.mlp_forward(pred_states, mlp_params(params, "head/predicate"), activation="none")
    boxes = tuple(BBox(*row) for row in np.asarray(proposals.boxes, dtype=np.float64))
    return ForwardResult(ent_out, pred_out, attention, boxes)


# ---------------------------------------------------------------------------
# discretization and confidence
# ---------------------------------------------------------------------------

def _nearest_classes(embeddings, dictionary):
    """Index of the closest dictionary row per embedding; ties pick the
    lowest class index (argmin keeps the first minimum)."""
    diff = embeddings[:, None, :] - dictionary[None, :, :]
    return (diff * diff).sum(axis=2).argmin(axis=1)


def class_probabilities(embeddings, dictionary):
    """Softmax over negative squared distances to each dictionary row."""
    diff = embeddings[:, None, :] - dictionary[None, :, :]
    logits = -(diff * diff).sum(axis=2)
    logits -= logits.max(axis=1, keepdims=True)
    num = np.exp(logits)
    return num / num.sum(axis=1, keepdims=True)


def discretize_mapped(soft, vocab, config):
    """Discretize and also report which soft rows survived.

    Returns (graph, entity_rows, predicate_rows): nodes classified as
    background are removed first (with their edges), then an edge (k, i)
    survives for its argmax role iff its strength clears the threshold,
    and finally each (predicate, role) keeps only its strongest entity.
    """
    ent_classes = _nearest_classes(soft.entity_embeddings, vocab.entity_embeddings)
    pred_classes = _nearest_classes(soft.predicate_embeddings, vocab.predicate_embeddings)
    entity_rows = np.nonzero(ent_classes != vocab.background_entity)[0]
    predicate_rows = np.nonzero(pred_classes != vocab.background_predicate)[0]

    entities = []
    for i in entity_rows:
        box = None if soft.boxes is None else soft.boxes[i]
        entities.append(EntityNode(int(ent_classes[i]), box))
    predicates = tuple(int(pred_classes[k]) for k in predicate_rows)

    best = {}  # (new_k, role) -> (strength, new_i)
    for new_k, k in enumerate(predicate_rows):
        for new_i, i in enumerate(entity_rows):
            strengths = soft.attention[:, k, i]
            r = int(strengths.argmax())
            a = float(strengths[r])
            if a >= config.edge_threshold:
                key = (new_k, r)
                if key not in best or a > best[key][0]:
                    best[key] = (a, new_i)
    edges = frozenset((k, i, r) for (k, r), (_, i) in best.items())
    graph = VspGraph(tuple(entities), predicates, edges)
    return graph, entity_rows, predicate_rows


def discretize(soft, vocab, config):
    return discretize_mapped(soft, vocab, config)[0]


def predicate_confidence(soft, vocab, config, subject_role=0, object_role=1):
    """Ranked triplets from a soft graph.

    Each surviving predicate node with both a subject and an object yields
    one triplet whose score is the product of the three class probabilities
    (softmax over negative squared embedding distances).  Sorted by
    descending score, ties broken by predicate node index.
    """
    graph, entity_rows, predicate_rows = discretize_mapped(soft, vocab, config)
    if graph.n_predicates == 0:
        return []
    ent_probs = class_probabilities(soft.entity_embeddings[entity_rows],
                                    vocab.entity_embeddings)
    pred_probs = class_probabilities(soft.predicate_embeddings[predicate_rows],
                                     vocab.predicate_embeddings)
    ranked = []
    for k in range(graph.n_predicates):
        args = graph.arguments(k)
        if subject_role not in args or object_role not in args:
            continue
        s, o = args[subject_role], args[object_role]
        s_cls = graph.entities[s].class_index
        o_cls = graph.entities[o].class_index
        p_cls = graph.predicates[k]
        score = float(ent_probs[s, s_cls] * ent_probs[o, o_cls] * pred_probs[k, p_cls])
        ranked.append(RankedTriplet(s_cls, graph.entities[s].box, p_cls,
                                    o_cls, graph.entities[o].box, score,
                                    predicate_node=int(predicate_rows[k])))
    ranked.sort(key=lambda t: (-t.score, t.predicate_node))
    return ranked
