"""Graph alignment: a bipartite assignment solver and the alternating
entity/predicate matching used for weak supervision.

The alignment between a predicted soft graph and a target graph is a pair
of injective partial maps — entity pairs (i, j) and predicate pairs (k, l)
— of maximal size min(n_out, n_target) on each side.  Costs couple the two
sides: matching predicates looks at how well their role edges agree under
the current entity matching, and vice versa, so the two assignments are
solved alternately starting from an empty predicate matching.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError
from .losses import BCE_CLAMP, iou, loss_total


@dataclass(frozen=True)
class Alignment:
    """entity_pairs: ((out_i, tgt_j), ...); predicate_pairs: ((out_k, tgt_l), ...)."""

    entity_pairs: tuple
    predicate_pairs: tuple


@dataclass(frozen=True)
class AlignResult:
    alignment: Alignment
    loss_trace: tuple
    converged: bool
    breakdown: object


# ---------------------------------------------------------------------------
# assignment solver
# ---------------------------------------------------------------------------

def hungarian(costs):
    """Minimum-cost assignment of rows to columns.

    Rectangular inputs are padded to square with a constant above the max
    entry, which leaves min(rows, cols) real pairs in the optimum.  Returns
    the matched (row, col) pairs sorted by row.  Deterministic: scanning is
    in index order and strict comparisons keep the first minimum.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ShapeError(f"cost matrix must be rank 2, got {costs.ndim}")
    n_rows, n_cols = costs.shape
    if n_rows == 0 or n_cols == 0:
        return []
    if not np.all(np.isfinite(costs)):
        raise UsageError("cost matrix contains non-finite entries")

    work = costs - costs.min()  # uniform shifts do not change the argmin
    n = max(n_rows, n_cols)
    if n_rows != n_cols:
        padded = np.full((n, n), work.max() + 1.0)
        padded[:n_rows, :n_cols] = work
        work = padded

    # Potentials-based shortest augmenting path, one row at a time.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.intp)  # row currently matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            reduced = work[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = reduced < minv[cols]
            minv[cols] = np.where(better, reduced, minv[cols])
            way[cols[better]] = j0
            pick = int(np.argmin(minv[cols]))
            delta = minv[cols][pick]
            j1 = int(cols[pick])
            u[row_of[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    pairs = []
    for j in range(1, n + 1):
        r, c = int(row_of[j]) - 1, j - 1
        if r < n_rows and c < n_cols:
            pairs.append((r, c))
    pairs.sort()
    return pairs


# ---------------------------------------------------------------------------
# cost matrices
# ---------------------------------------------------------------------------

def _squared_distances(a, b):
    """[n_a, n_b] matrix of squared Euclidean row distances."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=2)


def _role_cross_entropy(p_slices, q_slices):
    """sum over roles and pairs of bce(p, q) for every (row_p, row_q) combination.

    p_slices, q_slices: [n_r, n, m] arrays whose last axis enumerates the
    aligned pairs on the *other* side.  Returns an [n_p, n_q] matrix.
    """
    p = np.clip(p_slices, BCE_CLAMP, 1.0 - BCE_CLAMP)
    log_p = np.log(p)
    log_1p = np.log1p(-p)
    total = np.zeros((p_slices.shape[1], q_slices.shape[1]))
    for r in range(p_slices.shape[0]):
        q = q_slices[r]
        total += -(log_p[r] @ q.T) - (log_1p[r] @ (1.0 - q).T)
    return total


def predicate_cost_matrix(out, tgt, entity_pairs, role_weight=10.0):
    """W[k, l] = |P_k - P_l|^2 + role_weight/(n_r |I_e|) * sum of edge cross entropies.

    The second term vanishes when no entities are aligned yet.
    """
    costs = _squared_distances(out.predicate_embeddings, tgt.predicate_embeddings)
    if len(entity_pairs) > 0:
        pairs = np.asarray(entity_pairs, dtype=np.intp)
        n_r = out.attention.shape[0]
        p = out.attention[:, :, pairs[:, 0]]
        q = tgt.attention[:, :, pairs[:, 1]]
        costs = costs + role_weight / (n_r * len(entity_pairs)) * _role_cross_entropy(p, q)
    return costs


def entity_cost_matrix(out, tgt, predicate_pairs, role_weight=10.0,
                       box_weight=0.0, box_eps=1e-3):
    """Mirror of the predicate costs: W[i, j] couples entity pairs through
    every aligned predicate pair's role edges.

    box_weight > 0 adds -box_weight * log(IoU + box_eps), the supervised
    localization penalty; both graphs must carry boxes for that.
    """
    costs = _squared_distances(out.entity_embeddings, tgt.entity_embeddings)
    if len(predicate_pairs) > 0:
        pairs = np.asarray(predicate_pairs, dtype=np.intp)
        n_r = out.attention.shape[0]
        # reorient so the last axis enumerates the aligned predicate pairs
        p = out.attention[:, pairs[:, 0]].transpose(0, 2, 1)
        q = tgt.attention[:, pairs[:, 1]].transpose(0, 2, 1)
        costs = costs + role_weight / (n_r * len(pairs)) * _role_cross_entropy(p, q)
    if box_weight > 0.0:
        if out.boxes is None or tgt.boxes is None:
            raise UsageError("supervised entity costs need boxes on both graphs")
        overlap = np.zeros(costs.shape)
        for i, box_i in enumerate(out.boxes):
            for j, box_j in enumerate(tgt.boxes):
                overlap[i, j] = iou(box_i, box_j)
        costs = costs - box_weight * np.log(overlap + box_eps)
    return costs


# ---------------------------------------------------------------------------
# alternating alignment
# ---------------------------------------------------------------------------

def align(out, tgt, role_weight=10.0, iterations=3, supervised=False,
          box_weight=1.0, box_eps=1e-3):
    """Alternate entity and predicate assignments for a few rounds.

    Starts from an empty predicate matching, so the first entity step uses
    embedding (and box) costs alone.  The loss trace records the active
    objective after each half-step from the first full alignment onward;
    each half-step minimizes its side exactly with the other fixed, so the
    trace is non-increasing.  Stops early once a round changes nothing.
    """
    if out.attention.shape[0] != tgt.attention.shape[0]:
        raise UsageError("role counts differ between the two graphs")
    sup_kwargs = dict(box_weight=box_weight, box_eps=box_eps) if supervised else {}

    predicate_pairs = ()
    entity_pairs = ()
    trace = []
    converged = False
    for round_no in range(iterations):
        we = entity_cost_matrix(out, tgt, predicate_pairs, role_weight,
                                box_weight=box_weight if supervised else 0.0,
                                box_eps=box_eps)
        new_entities = tuple(hungarian(we))
        if round_no > 0:
            trace.append(loss_total(out, tgt, Alignment(new_entities, predicate_pairs),
                                    role_weight, supervised=supervised, **sup_kwargs).total)
        wp = predicate_cost_matrix(out, tgt, new_entities, role_weight)
        new_predicates = tuple(hungarian(wp))
        trace.append(loss_total(out, tgt, Alignment(new_entities, new_predicates),
                                role_weight, supervised=supervised, **sup_kwargs).total)
        if new_entities == entity_pairs and new_predicates == predicate_pairs:
            converged = True
            entity_pairs, predicate_pairs = new_entities, new_predicates
            break
        entity_pairs, predicate_pairs = new_entities, new_predicates
    final = Alignment(entity_pairs, predicate_pairs)
    breakdown = loss_total(out, tgt, final, role_weight, supervised=supervised, **sup_kwargs)
    return AlignResult(final, tuple(trace), converged, breakdown)


def independent_align(out, tgt, role_weight=10.0, supervised=False,
                      box_weight=1.0, box_eps=1e-3):
    """Baseline: match entities and predicates in one shot, ignoring roles.

    Both matchings use embedding distances only; role_weight enters only
    the reported breakdown so the result is scored on the same inner
    objective the iterative procedure minimizes.
    """
    we = entity_cost_matrix(out, tgt, (), role_weight=0.0,
                            box_weight=box_weight if supervised else 0.0,
                            box_eps=box_eps)
    wp = predicate_cost_matrix(out, tgt, (), role_weight=0.0)
    final = Alignment(tuple(hungarian(we)), tuple(hungarian(wp)))
    sup_kwargs = dict(box_weight=box_weight, box_eps=box_eps) if supervised else {}
    breakdown = loss_total(out, tgt, final, role_weight,
                           supervised=supervised, **sup_kwargs)
    return AlignResult(final, (breakdown.total,), True, breakdown)
