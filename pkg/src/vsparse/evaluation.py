"""Recall-based evaluation protocols over ranked triplet predictions.

Four protocols, differing in what the model is given at test time:

* SGGen  — detector proposals only; a prediction matches a ground-truth
  triplet when all three classes agree and both the subject and object
  boxes overlap their counterparts at IoU >= threshold.
* PhrDet — like SGGen but localization is judged on the union box of
  subject and object.
* SGCls  — ground-truth boxes replace the proposals.
* PredCls — ground-truth boxes and entity classes: entity embeddings are
  overwritten with the class embeddings after the forward pass, leaving
  predicate and role inference untouched.

Matching is greedy in rank order and each ground-truth triplet can be
claimed once.  Recall@K averages matched/|GT| over images, skipping
images with no ground-truth triplets.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UsageError
from .graphs import RankedTriplet, SoftGraph, union_box, vsp_to_sgg
from .losses import iou
from .model import (ModelConfig, Proposals, forward, predicate_confidence,
                    vocab_with_current_embeddings)

PROTOCOLS = ("SGGen", "PhrDet", "SGCls", "PredCls")


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "SGGen"
    ks: tuple = (50, 100)
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol '{self.protocol}'; "
                              f"choose from {', '.join(PROTOCOLS)}")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be positive")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError("iou_threshold must lie in (0, 1]")


def gt_triplets(graph):
    """Ground-truth triplets as RankedTriplet records (score-less)."""
    scene, _ = vsp_to_sgg(graph)
    out = []
    for t in scene.triplets:
        s, o = scene.entities[t.subject], scene.entities[t.object]
        out.append(RankedTriplet(s.class_index, s.box, t.predicate,
                                 o.class_index, o.box, None))
    return out


def _boxes_match(pred, gt, threshold, union):
    if union:
        return iou(union_box(pred.subject_box, pred.object_box),
                   union_box(gt.subject_box, gt.object_box)) >= threshold
    return (iou(pred.subject_box, gt.subject_box) >= threshold
            and iou(pred.object_box, gt.object_box) >= threshold)


def match_triplets(predictions, truths, iou_threshold=0.5, union=False):
    """Greedy matching in prediction order; returns the number matched."""
    claimed = [False] * len(truths)
    matched = 0
    for p in predictions:
        for gi, g in enumerate(truths):
            if claimed[gi]:
                continue
            if (p.subject_class == g.subject_class
                    and p.predicate_class == g.predicate_class
                    and p.object_class == g.object_class
                    and _boxes_match(p, g, iou_threshold, union)):
                claimed[gi] = True
                matched += 1
                break
    return matched


def recall_at_k(matched_counts, gt_sizes):
    """Mean of matched/|GT| over images; images with empty GT are skipped."""
    ratios = [m / max(1, n) for m, n in zip(matched_counts, gt_sizes) if n > 0]
    if not ratios:
        return 0.0
    return float(np.mean(ratios))


def _float_proposals(props):
    return Proposals(np.asarray(props.boxes, dtype=np.float64),
                     np.asarray(props.features, dtype=np.float64))


def rank_example(example, params, model_config, vocab, protocol):
    """Ranked triplets for one image under a protocol."""
    if protocol in ("SGCls", "PredCls"):
        props = _float_proposals(example.gt_proposals)
    else:
        props = _float_proposals(example.proposals)
    with ad.no_grad():
        soft = forward(props, (example.width, example.height),
                       params, model_config).soft()
    if protocol == "PredCls":
        rows = np.stack([vocab.entity_embeddings[e.class_index]
                         for e in example.graph.entities])
        if rows.shape[0] != soft.entity_embeddings.shape[0]:
            raise UsageError("PredCls: gt proposals must be in entity order")
        soft = SoftGraph(rows, soft.predicate_embeddings, soft.attention, soft.boxes)
    return predicate_confidence(soft, vocab, model_config)


def run_protocol(dataset, params, model_config, eval_config):
    """Evaluate one protocol over a dataset; returns a plain dict report."""
    vocab = vocab_with_current_embeddings(dataset.vocabulary, params)
    max_k = max(eval_config.ks)
    matched = {k: [] for k in eval_config.ks}
    gt_sizes = []
    union = eval_config.protocol == "PhrDet"
    for example in dataset.examples:
        truths = gt_triplets(example.graph)
        gt_sizes.append(len(truths))
        ranked = rank_example(example, params, model_config, vocab,
                              eval_config.protocol)[:max_k]
        for k in eval_config.ks:
            matched[k].append(match_triplets(ranked[:k], truths,
                                             eval_config.iou_threshold, union))
    return {
        "protocol": eval_config.protocol,
        "n_images": len(dataset.examples),
        "iou_threshold": eval_config.iou_threshold,
        "recalls": {str(k): recall_at_k(matched[k], gt_sizes)
                    for k in eval_config.ks},
    }


def evaluate(dataset, params, model_config, protocols=("SGGen", "PhrDet", "SGCls", "PredCls"),
             ks=(50, 100), iou_threshold=0.5):
    """Run several protocols and collect their reports."""
    reports = []
    for name in protocols:
        cfg = EvalConfig(protocol=name, ks=tuple(ks), iou_threshold=iou_threshold)
        reports.append(run_protocol(dataset, params, model_config, cfg))
    return reports


def format_report_table(reports):
    """Small fixed-width table of recalls per protocol."""
    ks = sorted({int(k) for rep in reports for k in rep["recalls"]})
    header = "protocol  " + "  ".join(f"{'R@' + str(k):>8}" for k in ks)
    lines = [header, "-" * len(header)]
    for rep in reports:
        cells = "  ".join(f"{rep['recalls'].get(str(k), float('nan')):8.4f}" for k in ks)
        lines.append(f"{rep['protocol']:<8}  {cells}")
    return "\n".join(lines)
