"""Alignment-conditioned losses between a predicted soft graph and a target.

All functions here are plain numpy and score a *given* alignment; the
differentiable twins used during training live in training.py and must
agree with these numerically (the test suite checks that).  Conventions:

* an empty alignment contributes zero, not NaN;
* the role term is a mean binary cross entropy over aligned predicate
  pairs x aligned entity pairs x roles, with probabilities clamped to
  [1e-12, 1 - 1e-12] before the logs.
"""

from dataclasses import dataclass

import numpy as np

BCE_CLAMP = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    entity: float
    predicate: float
    role: float
    total: float
    role_weight: float
    entity_supervised: float | None = None

    def as_dict(self):
        d = {"loss_entity": self.entity, "loss_predicate": self.predicate,
             "loss_role": self.role, "loss_total": self.total}
        if self.entity_supervised is not None:
            d["loss_entity_supervised"] = self.entity_supervised
        return d


def iou(a, b):
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def bce(p, q, clamp=BCE_CLAMP):
    """-q log p - (1-q) log(1-p), elementwise over arrays."""
    p = np.clip(p, clamp, 1.0 - clamp)
    return -(q * np.log(p) + (1.0 - q) * np.log1p(-p))


def _pairs_to_arrays(pairs):
    if len(pairs) == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    arr = np.asarray(pairs, dtype=np.intp)
    return arr[:, 0], arr[:, 1]


def loss_entity(out, tgt, entity_pairs):
    """Mean squared embedding distance over aligned entity pairs."""
    if len(entity_pairs) == 0:
        return 0.0
    i_idx, j_idx = _pairs_to_arrays(entity_pairs)
    diff = out.entity_embeddings[i_idx] - tgt.entity_embeddings[j_idx]
    return float((diff * diff).sum(axis=1).mean())


def loss_entity_supervised(out, tgt, entity_pairs, box_weight=1.0, box_eps=1e-3):
    """Entity loss plus a box overlap penalty, used only to steer alignment.

    The penalty -box_weight * log(IoU + box_eps) is constant with respect
    to model parameters (output boxes come straight from the proposals),
    so it never contributes gradient.
    """
    if len(entity_pairs) == 0:
        return 0.0
    base = loss_entity(out, tgt, entity_pairs)
    penalty = 0.0
    for i, j in entity_pairs:
        penalty += -box_weight * np.log(iou(out.boxes[i], tgt.boxes[j]) + box_eps)
    return float(base + penalty / len(entity_pairs))


def loss_predicate(out, tgt, predicate_pairs):
    if len(predicate_pairs) == 0:
        return 0.0
    k_idx, l_idx = _pairs_to_arrays(predicate_pairs)
    diff = out.predicate_embeddings[k_idx] - tgt.predicate_embeddings[l_idx]
    return float((diff * diff).sum(axis=1).mean())


def loss_role(out, tgt, entity_pairs, predicate_pairs):
    """Mean cross entropy between predicted soft edges and target edges.

    Normalized by n_roles * |aligned predicates| * |aligned entities|;
    zero when either alignment side is empty.
    """
    if len(entity_pairs) == 0 or len(predicate_pairs) == 0:
        return 0.0
    i_idx, j_idx = _pairs_to_arrays(entity_pairs)
    k_idx, l_idx = _pairs_to_arrays(predicate_pairs)
    p = out.attention[:, k_idx][:, :, i_idx]
    q = tgt.attention[:, l_idx][:, :, j_idx]
    n_r = out.attention.shape[0]
    return float(bce(p, q).sum() / (n_r * len(entity_pairs) * len(predicate_pairs)))


def loss_total(out, tgt, alignment, role_weight=10.0, supervised=False,
               box_weight=1.0, box_eps=1e-3):
    """L = L_E + L_P + role_weight * L_R as a LossBreakdown.

    With supervised=True the total swaps in the box-penalized entity term,
    matching the objective the supervised alignment minimizes.
    """
    ent = loss_entity(out, tgt, alignment.entity_pairs)
    pred = loss_predicate(out, tgt, alignment.predicate_pairs)
    role = loss_role(out, tgt, alignment.entity_pairs, alignment.predicate_pairs)
    sup = None
    if supervised:
        sup = loss_entity_supervised(out, tgt, alignment.entity_pairs, box_weight, box_eps)
        total = sup + pred + role_weight * role
    else:
        total = ent + pred + role_weight * role
    return LossBreakdown(ent, pred, role, float(total), role_weight, sup)
