"""Weakly supervised training: align, then descend on the aligned loss.

Each step forwards one example, finds the best graph alignment between the
prediction and the ground truth (coordinate descent over two assignment
problems), freezes that alignment, and differentiates the aligned loss —
the outer min over parameters of an inner min over alignments.  The box
overlap penalty used in supervised mode influences only which alignment
wins; it is constant in the parameters, so gradients are identical for a
fixed alignment.

Gradients are averaged over the batch; the optimizer is Adam.  Runs are
deterministic given the seed: batch order is derived per epoch from the
seed, so an interrupted run resumed from a checkpoint replays the exact
same arithmetic.
"""

import csv
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .alignment import align
from .errors import ConfigError, UsageError
from .graphs import SoftGraph, encode_soft
from .losses import BCE_CLAMP, LossBreakdown
from .model import Proposals, build_params, forward


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "weak"
    role_weight: float = 10.0
    align_iterations: int = 3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 0        # epochs between checkpoints; 0 = final only
    box_weight: float = 1.0
    box_eps: float = 1e-3
    # class embeddings act like fixed word vectors by default; training
    # them jointly invites a collapse where every class drifts together
    train_class_embeddings: bool = False
    # epochs at the start with the role term silenced.  Appearance-only
    # alignment first settles the entity labelling; otherwise the role
    # term can freeze in a wrong but self-consistent class pairing that
    # the optimizer never escapes
    role_warmup_epochs: int = 0

    def __post_init__(self):
        if self.mode not in ("weak", "full"):
            raise ConfigError(f"mode must be 'weak' or 'full', got '{self.mode}'")
        if self.align_iterations < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("align_iterations/batch_size must be >= 1, epochs >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.role_warmup_epochs < 0:
            raise ConfigError("role_warmup_epochs must be >= 0")


def _target_soft(graph, vocab, params):
    """encode_soft against the *current* trainable embeddings."""
    base = encode_soft(graph, vocab)
    ent_idx = [e.class_index for e in graph.entities]
    ent = params["embed/entity"].values[ent_idx] if ent_idx else base.entity_embeddings
    pred = (params["embed/predicate"].values[list(graph.predicates)]
            if graph.predicates else base.predicate_embeddings)
    return replace_soft(base, ent, pred)


def replace_soft(soft, ent, pred):
    return SoftGraph(np.asarray(ent, dtype=np.float64),
                     np.asarray(pred, dtype=np.float64), soft.attention, soft.boxes)


def _embedding_rows(params, name, indices, trainable):
    """Rows of a class embedding table, on the tape when trainable."""
    idx = np.asarray(indices, dtype=np.intp)
    if trainable:
        return ad.gather_rows(params[name], idx)
    return ad.constant(params[name].values[idx])


def example_loss(result, graph, alignment, params, train_config):
    """The differentiable aligned loss for one example.

    Returns (total tensor, LossBreakdown of plain floats).  The alignment
    is data, not part of the graph being differentiated.
    """
    cfg = train_config
    ent_pairs, pred_pairs = alignment.entity_pairs, alignment.predicate_pairs
    n_r = result.attention.shape[0]
    terms = []
    ent_val = pred_val = role_val = 0.0

    if ent_pairs:
        i_idx = [p[0] for p in ent_pairs]
        j_cls = [graph.entities[p[1]].class_index for p in ent_pairs]
        target = _embedding_rows(params, "embed/entity", j_cls, cfg.train_class_embeddings)
        diff = ad.sub(ad.gather_rows(result.entity_embeddings, i_idx), target)
        ent_loss = ad.scale(ad.sum_all(ad.square(diff)), 1.0 / len(ent_pairs))
        terms.append(ent_loss)
        ent_val = ent_loss.item()
    if pred_pairs:
        k_idx = [p[0] for p in pred_pairs]
        l_cls = [graph.predicates[p[1]] for p in pred_pairs]
        target = _embedding_rows(params, "embed/predicate", l_cls, cfg.train_class_embeddings)
        diff = ad.sub(ad.gather_rows(result.predicate_embeddings, k_idx), target)
        pred_loss = ad.scale(ad.sum_all(ad.square(diff)), 1.0 / len(pred_pairs))
        terms.append(pred_loss)
        pred_val = pred_loss.item()
    if ent_pairs and pred_pairs:
        i_idx = [p[0] for p in ent_pairs]
        j_idx = [p[1] for p in ent_pairs]
        k_idx = [p[0] for p in pred_pairs]
        l_idx = [p[1] for p in pred_pairs]
        target_attention = np.zeros((n_r, len(pred_pairs), len(ent_pairs)))
        arguments = {(k, i): r for (k, i, r) in graph.edges}
        for kk, l in enumerate(l_idx):
            for ii, j in enumerate(j_idx):
                r = arguments.get((l, j))
                if r is not None:
                    target_attention[r, kk, ii] = 1.0
        role_sum = None
        for r in range(n_r):
            rows = ad.gather_rows(ad.index_axis0(result.attention, r), k_idx)
            block = ad.gather_cols(rows, i_idx)
            term = ad.sum_all(ad.binary_cross_entropy(block, target_attention[r], BCE_CLAMP))
            role_sum = term if role_sum is None else ad.add(role_sum, term)
        role_loss = ad.scale(role_sum, 1.0 / (n_r * len(ent_pairs) * len(pred_pairs)))
        terms.append(ad.scale(role_loss, cfg.role_weight))
        role_val = role_loss.item()

    if not terms:
        total = ad.constant(0.0)
    else:
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
    breakdown = LossBreakdown(ent_val, pred_val, role_val, total.item(), cfg.role_weight)
    return total, breakdown


def _align_example(result, example, vocab, params, train_config):
    out = result.soft()
    tgt = _target_soft(example.graph, vocab, params)
    supervised = train_config.mode == "full"
    return align(out, tgt, role_weight=train_config.role_weight,
                 iterations=train_config.align_iterations, supervised=supervised,
                 box_weight=train_config.box_weight, box_eps=train_config.box_eps)


def train_step(batch, params, model_config, train_config, vocab):
    """One optimizer step over a batch; returns the mean loss breakdown.

    Examples with an empty ground-truth graph contribute nothing; a batch
    of only such examples leaves the parameters untouched.
    """
    if not batch:
        raise UsageError("empty batch")
    for name in ("embed/entity", "embed/predicate"):
        params[name].requires_grad = train_config.train_class_embeddings
    n = len(batch)
    sums = np.zeros(4)
    any_signal = False
    for example in batch:
        props = Proposals(np.asarray(example.proposals.boxes, dtype=np.float64),
                          np.asarray(example.proposals.features, dtype=np.float64))
        result = forward(props, (example.width, example.height), params, model_config)
        if example.graph.n_entities == 0 and example.graph.n_predicates == 0:
            continue
        outcome = _align_example(result, example, vocab, params, train_config)
        total, breakdown = example_loss(result, example.graph, outcome.alignment,
                                        params, train_config)
        if total.requires_grad:
            ad.backward(total, seed=1.0 / n)
            any_signal = True
        sums += [breakdown.entity, breakdown.predicate, breakdown.role, breakdown.total]
    if any_signal:
        ad.adam_step(params, lr=train_config.lr,
                     betas=(train_config.beta1, train_config.beta2),
                     eps=train_config.adam_eps)
    else:
        params.zero_grads()
    mean = sums / n
    return LossBreakdown(mean[0], mean[1], mean[2], mean[3], train_config.role_weight)


class TrainLog:
    """CSV log of per-step loss breakdowns."""

    COLUMNS = ("step", "loss_entity", "loss_predicate", "loss_role", "loss_total")

    def __init__(self, path):
        self.path = path
        fresh = not os.path.exists(path)
        self._fh = open(path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(self.COLUMNS)

    def record(self, step, breakdown):
        self._writer.writerow([step, f"{breakdown.entity:.10g}",
                               f"{breakdown.predicate:.10g}", f"{breakdown.role:.10g}",
                               f"{breakdown.total:.10g}"])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _epoch_order(seed, epoch, count):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, epoch)))
    return rng.permutation(count)


def fit(dataset, model_config, train_config, out_dir=None, params=None,
        start_epoch=0, step=0, progress=None):
    """Train over a dataset; returns (params, history).

    history is one dict per epoch with mean losses and timing.  When
    out_dir is given, writes train_log.csv and periodic checkpoints that
    carry optimizer state, so resuming replays identically.
    """
    vocab = dataset.vocabulary
    if params is None:
        rng = np.random.default_rng(np.random.SeedSequence(train_config.seed, spawn_key=(0,)))
        params = build_params(model_config, vocab, rng)
    log = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log = TrainLog(os.path.join(out_dir, "train_log.csv"))
    history = []
    try:
        for epoch in range(start_epoch, train_config.epochs):
            stage = train_config
            if epoch < train_config.role_warmup_epochs:
                stage = replace(train_config, role_weight=0.0)
            order = _epoch_order(train_config.seed, epoch, len(dataset.examples))
            epoch_sums = np.zeros(4)
            n_steps = 0
            t0 = time.perf_counter()
            for lo in range(0, len(order), train_config.batch_size):
                batch = [dataset.examples[i] for i in order[lo:lo + train_config.batch_size]]
                breakdown = train_step(batch, params, model_config, stage, vocab)
                step += 1
                n_steps += 1
                epoch_sums += [breakdown.entity, breakdown.predicate,
                               breakdown.role, breakdown.total]
                if log is not None:
                    log.record(step, breakdown)
            mean = epoch_sums / max(1, n_steps)
            entry = {"epoch": epoch, "step": step, "loss_entity": float(mean[0]),
                     "loss_predicate": float(mean[1]), "loss_role": float(mean[2]),
                     "loss_total": float(mean[3]), "seconds": time.perf_counter() - t0}
            history.append(entry)
            if progress is not None:
                progress(entry)
            if out_dir is not None and train_config.checkpoint_every > 0 \
                    and (epoch + 1) % train_config.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"checkpoint_{epoch + 1:04d}.vspc"),
                                params, epoch + 1, step)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "checkpoint_final.vspc"),
                            params, train_config.epochs, step)
    finally:
        if log is not None:
            log.close()
    return params, history


def save_checkpoint(path, params, epoch, step):
    params.save(path, include_optimizer=True,
                extra={"epoch": float(epoch), "step": float(step)})


def load_checkpoint(path):
    """Returns (params, epoch, step)."""
    params, extra = ad.ParamStore.load(path)
    epoch = int(np.asarray(extra.get("epoch", 0.0)).reshape(-1)[0])
    step = int(np.asarray(extra.get("step", 0.0)).reshape(-1)[0])
    return params, epoch, step


def resume_fit(dataset, model_config, train_config, checkpoint_path, out_dir=None):
    params, epoch, step = load_checkpoint(checkpoint_path)
    return fit(dataset, model_config, train_config, out_dir=out_dir,
               params=params, start_epoch=epoch, step=step)
