"""Bipartite role-graph parsing of object proposals.

A scene is parsed into a graph with two kinds of nodes — entities
(object proposals with boxes) and predicates — connected by semantic
role edges (subject, object, instrument).  The model passes messages
between the two sides through per-role attention, and training aligns
the predicted graph against ground truth with no per-node supervision.

The pieces:

- :mod:`vsparse.autodiff`    reverse-mode tape over numpy float64
- :mod:`vsparse.graphs`      graph containers, conversions, file formats
- :mod:`vsparse.model`       attention, message passing, discretization
- :mod:`vsparse.alignment`   Hungarian matching + coordinate descent
- :mod:`vsparse.losses`      embedding/role losses over an alignment
- :mod:`vsparse.training`    optimizer loop, logging, checkpoints
- :mod:`vsparse.evaluation`  SGGen/PhrDet/SGCls/PredCls recall
- :mod:`vsparse.synth`       synthetic scene generator and dataset files
- :mod:`vsparse.report`      loss-curve and recall figures
- :mod:`vsparse.cli`         the ``vsparse`` command
"""

from .alignment import Alignment, AlignResult, align, hungarian, independent_align
from .errors import (ConfigError, FormatError, GenerationError, NumericError,
                     ShapeError, StaleTapeError, UsageError, VsparseError)
from .evaluation import EvalConfig, evaluate, match_triplets, recall_at_k
from .graphs import (BACKGROUND, BBox, EntityNode, RankedTriplet, SceneGraph,
                     SoftGraph, Triplet, Vocabulary, VspGraph, encode_soft,
                     sgg_to_vsp, union_box, validate, vsp_to_sgg)
from .losses import LossBreakdown, iou, loss_total
from .model import (ModelConfig, Proposals, box_encoding, build_params,
                    discretize, forward, predicate_confidence)
from .synth import Dataset, Example, SynthConfig, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint, train_step

__version__ = "0.1.0"

__all__ = [
    "Alignment", "AlignResult", "align", "hungarian", "independent_align",
    "ConfigError", "FormatError", "GenerationError", "NumericError",
    "ShapeError", "StaleTapeError", "UsageError", "VsparseError",
    "EvalConfig", "evaluate", "match_triplets", "recall_at_k",
    "BACKGROUND", "BBox", "EntityNode", "RankedTriplet", "SceneGraph",
    "SoftGraph", "Triplet", "Vocabulary", "VspGraph", "encode_soft",
    "sgg_to_vsp", "union_box", "validate", "vsp_to_sgg",
    "LossBreakdown", "iou", "loss_total",
    "ModelConfig", "Proposals", "box_encoding", "build_params",
    "discretize", "forward", "predicate_confidence",
    "Dataset", "Example", "SynthConfig", "generate_dataset",
    "read_dataset", "write_dataset",
    "TrainConfig", "fit", "load_checkpoint", "save_checkpoint", "train_step",
    "__version__",
]
