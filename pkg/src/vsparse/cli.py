"""Command-line entry point.

One binary, seven subcommands::

    vsparse synth      generate a synthetic dataset directory
    vsparse train      fit a model, writing checkpoints + a CSV loss log
    vsparse eval       recall protocols -> JSON report + bar chart
    vsparse align      align one image's prediction against its ground truth
    vsparse convert    translate between scene-graph and role-graph files
    vsparse gradcheck  finite-difference audit of the full model
    vsparse infer      discretized graphs (JSONL, optional DOT files)

Configuration lives in a JSON file with sections "model", "train",
"synth" and "eval"; any value can be overridden on the command line with
``--set section.key=value`` (values are parsed as JSON when possible).
Every artifact-producing run writes resolved_config.json into its output
directory so reruns are reproducible.  Exit codes: 0 success, 1 usage or
configuration error, 2 data/format error, 3 numeric failure.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .alignment import align, independent_align
from .errors import (ConfigError, FormatError, NumericError, UsageError,
                     VsparseError)
from .evaluation import EvalConfig, evaluate, format_report_table
from .graphs import (Vocabulary, load_vocabulary, read_graphs,
                     scene_graph_from_doc, scene_graph_to_doc, sgg_to_vsp,
                     vsp_to_sgg, write_graphs)
from .model import (ModelConfig, Proposals, build_params, discretize, forward,
                    vocab_with_current_embeddings)
from .report import plot_loss_curves, write_reports
from .synth import (SynthConfig, config_from_dict, config_to_dict,
                    generate_dataset, read_dataset, write_dataset)
from .training import (TrainConfig, fit, load_checkpoint, save_checkpoint,
                       _target_soft)

_EXIT_OK = 0
_EXIT_USAGE = 1
_EXIT_FORMAT = 2
_EXIT_NUMERIC = 3

_EDGE_STYLES = {"subject": "solid", "object": "dashed", "instrument": "dotted"}


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

_SECTIONS = ("model", "train", "synth", "eval")


def _dataclass_dict(obj):
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _from_section(cls, doc, section, tuple_keys=()):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    doc = dict(doc)
    for key in tuple_keys:
        if key in doc and isinstance(doc[key], list):
            doc[key] = tuple(doc[key])
    return cls(**doc)


def load_config(path=None, overrides=()):
    """Merge file + --set overrides into a {section: {key: value}} dict."""
    merged = {name: {} for name in _SECTIONS}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError(f"{path}: config root must be an object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name in _SECTIONS:
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            merged[name].update(section)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got '{item}'")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise UsageError(f"--set key must be section.key, got '{dotted}'")
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section '{section}'")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        merged[section][key] = value
    return merged


def _build_synth_config(config):
    return config_from_dict(config["synth"])


def _build_train_config(config):
    return _from_section(TrainConfig, config["train"], "train")


def _build_eval_config(config):
    return _from_section(EvalConfig, config["eval"], "eval", tuple_keys=("ks",))


def _build_model_config(config, dataset=None):
    """Model section; unset dimensions are inferred from the dataset."""
    doc = dict(config["model"])
    if dataset is not None:
        vocab = dataset.vocabulary
        inferred = {
            "feature_dim": int(dataset.examples[0].proposals.features.shape[1])
            if dataset.examples else vocab.embedding_dim + 6,
            "n_roles": vocab.n_roles,
            "embedding_dim": vocab.embedding_dim,
        }
        for key, value in inferred.items():
            existing = doc.get(key)
            if existing is None:
                doc[key] = value
            elif existing != value:
                raise ConfigError(
                    f"model.{key}={existing} conflicts with dataset ({value})")
    if "feature_dim" not in doc:
        raise ConfigError("model.feature_dim is required without a dataset")
    return _from_section(ModelConfig, doc, "model")


def write_snapshot(out_dir, config, extra=None):
    """Persist the resolved configuration for reproducible reruns."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {name: dict(section) for name, section in config.items()}
    if extra:
        doc.update(extra)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _resolved(config, **overrides):
    out = {name: dict(section) for name, section in config.items()}
    for section, cfg_obj in overrides.items():
        out[section] = _dataclass_dict(cfg_obj)
    return out


# ---------------------------------------------------------------------------
# DOT emission
# ---------------------------------------------------------------------------

def graph_to_dot(graph, vocab, name="scene"):
    """Graphviz text for one role graph.

    Entities are boxes, predicates are ellipses; edge style encodes the
    role (solid=subject, dashed=object, dotted=instrument).
    """
    lines = [f"digraph \"{name}\" {{", "  rankdir=LR;"]
    for i, e in enumerate(graph.entities):
        label = vocab.entity_classes[e.class_index]
        lines.append(f"  e{i} [shape=box, label=\"{label}\"];")
    for k, cls in enumerate(graph.predicates):
        label = vocab.predicate_classes[cls]
        lines.append(f"  p{k} [shape=ellipse, style=rounded, label=\"{label}\"];")
    for (k, i, r) in sorted(graph.edges):
        role = vocab.role_classes[r]
        style = _EDGE_STYLES.get(role, "solid")
        lines.append(f"  p{k} -> e{i} [style={style}, label=\"{role}\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    config = load_config(args.config, args.set)
    synth_cfg = _build_synth_config(config)
    dataset = generate_dataset(synth_cfg, args.count, first_index=args.first_index,
                               threads=args.threads)
    write_dataset(args.out, dataset)
    write_snapshot(args.out, _resolved(config, synth=synth_cfg),
                   {"count": args.count, "first_index": args.first_index})
    print(f"wrote {args.count} scenes to {args.out}")
    return _EXIT_OK


def _load_data(path):
    return read_dataset(path)


def cmd_train(args):
    config = load_config(args.config, args.set)
    dataset = _load_data(args.data)
    model_cfg = _build_model_config(config, dataset)
    train_cfg = _build_train_config(config)
    params = None
    start_epoch = step = 0
    if args.resume:
        params, start_epoch, step = load_checkpoint(args.resume)
    write_snapshot(args.out, _resolved(config, model=model_cfg, train=train_cfg),
                   {"data": os.path.abspath(args.data)})

    def progress(entry):
        print(f"epoch {entry['epoch']:4d}  loss {entry['loss_total']:10.4f}  "
              f"entity {entry['loss_entity']:8.4f}  predicate {entry['loss_predicate']:8.4f}  "
              f"role {entry['loss_role']:8.5f}  {entry['seconds']:5.1f}s", flush=True)

    params, _history = fit(dataset, model_cfg, train_cfg, out_dir=args.out,
                           params=params, start_epoch=start_epoch, step=step,
                           progress=progress)
    png = plot_loss_curves(os.path.join(args.out, "train_log.csv"))
    print(f"final checkpoint: {os.path.join(args.out, 'checkpoint_final.vspc')}")
    print(f"loss curves: {png}")
    return _EXIT_OK


def cmd_eval(args):
    config = load_config(args.config, args.set)
    dataset = _load_data(args.data)
    model_cfg = _build_model_config(config, dataset)
    eval_cfg = _build_eval_config(config)
    params, _, _ = load_checkpoint(args.checkpoint)
    protocols = args.protocols or [eval_cfg.protocol]
    reports = evaluate(dataset, params, model_cfg, protocols=protocols,
                       ks=eval_cfg.ks, iou_threshold=eval_cfg.iou_threshold)
    json_path, png_path = write_reports(reports, args.out)
    write_snapshot(args.out, _resolved(config, model=model_cfg, eval=eval_cfg),
                   {"checkpoint": os.path.abspath(args.checkpoint),
                    "data": os.path.abspath(args.data), "protocols": list(protocols)})
    print(format_report_table(reports))
    print(f"report: {json_path}")
    print(f"chart:  {png_path}")
    return _EXIT_OK


def _find_example(dataset, image_id):
    if image_id is None:
        return dataset.examples[0]
    for example in dataset.examples:
        if example.image_id == image_id:
            return example
    raise UsageError(f"image id '{image_id}' not in dataset")


def cmd_align(args):
    config = load_config(args.config, args.set)
    dataset = _load_data(args.data)
    model_cfg = _build_model_config(config, dataset)
    train_cfg = _build_train_config(config)
    params, _, _ = load_checkpoint(args.checkpoint)
    example = _find_example(dataset, args.image_id)
    props = Proposals(np.asarray(example.proposals.boxes, dtype=np.float64),
                      np.asarray(example.proposals.features, dtype=np.float64))
    with ad.no_grad():
        soft = forward(props, (example.width, example.height),
                       params, model_cfg).soft()
    vocab = vocab_with_current_embeddings(dataset.vocabulary, params)
    target = _target_soft(example.graph, vocab, params)
    supervised = train_cfg.mode == "full"
    if args.independent:
        outcome = independent_align(soft, target, supervised=supervised,
                                    box_weight=train_cfg.box_weight,
                                    box_eps=train_cfg.box_eps)
    else:
        outcome = align(soft, target, role_weight=train_cfg.role_weight,
                        iterations=train_cfg.align_iterations, supervised=supervised,
                        box_weight=train_cfg.box_weight, box_eps=train_cfg.box_eps)
    doc = {
        "image_id": example.image_id,
        "entity_pairs": [list(p) for p in outcome.alignment.entity_pairs],
        "predicate_pairs": [list(p) for p in outcome.alignment.predicate_pairs],
        "loss_trace": [float(v) for v in outcome.loss_trace],
        "converged": outcome.converged,
        "losses": outcome.breakdown.as_dict(),
    }
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"align_{example.image_id}.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    write_snapshot(args.out, _resolved(config, model=model_cfg, train=train_cfg),
                   {"checkpoint": os.path.abspath(args.checkpoint),
                    "image_id": example.image_id})
    print(f"alignment for {example.image_id}: "
          f"{len(doc['entity_pairs'])} entity pairs, "
          f"{len(doc['predicate_pairs'])} predicate pairs, "
          f"loss {doc['losses']['loss_total']:.6f}")
    print(f"wrote {path}")
    return _EXIT_OK


def cmd_convert(args):
    vocab = load_vocabulary(args.vocab)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    if args.to == "sgg":
        graphs = read_graphs(args.input, vocab)
        dropped_total = 0
        with open(args.out, "w") as fh:
            for g in graphs:
                scene, dropped = vsp_to_sgg(g)
                dropped_total += dropped
                fh.write(json.dumps(scene_graph_to_doc(scene, vocab)))
                fh.write("\n")
        note = f" ({dropped_total} non-binary predicates dropped)" if dropped_total else ""
        print(f"converted {len(graphs)} graphs to scene graphs{note}")
    else:
        graphs = []
        with open(args.input) as fh:
            for line_no, line in enumerate(fh, start=1):
                if line.strip():
                    doc = json.loads(line)
                    scene = scene_graph_from_doc(doc, vocab, f"{args.input}:{line_no}")
                    graphs.append(sgg_to_vsp(scene, vocab))
        write_graphs(args.out, graphs, vocab)
        print(f"converted {len(graphs)} scene graphs to role graphs")
    return _EXIT_OK


def cmd_gradcheck(args):
    config = load_config(args.config, args.set)
    doc = dict(config["model"])
    doc.setdefault("feature_dim", 10)
    doc.setdefault("n_roles", 2)
    doc.setdefault("n_predicates", 3)
    doc.setdefault("entity_state_dim", 8)
    doc.setdefault("predicate_state_dim", 8)
    doc.setdefault("embedding_dim", 6)
    doc.setdefault("mp_iterations", 2)
    model_cfg = _from_section(ModelConfig, doc, "model")
    rng = np.random.default_rng(args.seed)
    vocab = Vocabulary.create(
        ["__background__", "thing_a", "thing_b"],
        ["__background__", "rel_a"],
        ["subject", "object", "instrument"][:model_cfg.n_roles],
        model_cfg.embedding_dim, rng)
    params = build_params(model_cfg, vocab, rng)
    n_e = args.entities
    boxes = np.sort(rng.uniform(10, 90, size=(n_e, 4)), axis=1)[:, [0, 2, 1, 3]]
    feats = rng.normal(size=(n_e, model_cfg.feature_dim))
    props = Proposals(boxes, feats)

    def loss_fn(store):
        res = forward(props, (100.0, 100.0), store, model_cfg)
        total = ad.sum_all(ad.square(res.entity_embeddings))
        total = ad.add(total, ad.sum_all(ad.square(res.predicate_embeddings)))
        return ad.add(total, ad.sum_all(ad.square(res.attention)))

    report = ad.grad_check(loss_fn, params, tolerance=args.tolerance)
    doc = {"ok": report.ok, "max_rel_error": report.max_rel_error,
           "worst_param": report.worst_param, "n_checked": report.n_checked,
           "tolerance": args.tolerance}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        write_snapshot(args.out, _resolved(config, model=model_cfg),
                       {"seed": args.seed, "entities": n_e})
    status = "PASS" if report.ok else "FAIL"
    print(f"gradcheck {status}: {report.n_checked} partials, "
          f"max relative error {report.max_rel_error:.3e} "
          f"(worst: {report.worst_param}, tolerance {args.tolerance:g})")
    if not report.ok:
        raise NumericError("gradient check failed")
    return _EXIT_OK


def cmd_infer(args):
    config = load_config(args.config, args.set)
    dataset = _load_data(args.data)
    model_cfg = _build_model_config(config, dataset)
    params, _, _ = load_checkpoint(args.checkpoint)
    vocab = vocab_with_current_embeddings(dataset.vocabulary, params)
    os.makedirs(args.out, exist_ok=True)
    graphs = []
    ids = []
    for example in dataset.examples:
        props = Proposals(np.asarray(example.proposals.boxes, dtype=np.float64),
                          np.asarray(example.proposals.features, dtype=np.float64))
        with ad.no_grad():
            soft = forward(props, (example.width, example.height),
                           params, model_cfg).soft()
        graph = discretize(soft, vocab, model_cfg)
        graphs.append(graph)
        ids.append(example.image_id)
        if args.dot:
            dot_path = os.path.join(args.out, f"{example.image_id}.dot")
            with open(dot_path, "w") as fh:
                fh.write(graph_to_dot(graph, vocab, name=example.image_id))
    path = os.path.join(args.out, "predictions.jsonl")
    write_graphs(path, graphs, vocab)
    with open(os.path.join(args.out, "image_ids.json"), "w") as fh:
        json.dump(ids, fh, indent=2)
        fh.write("\n")
    write_snapshot(args.out, _resolved(config, model=model_cfg),
                   {"checkpoint": os.path.abspath(args.checkpoint),
                    "data": os.path.abspath(args.data)})
    n_edges = sum(len(g.edges) for g in graphs)
    print(f"wrote {len(graphs)} graphs ({n_edges} edges) to {path}"
          + (f" with DOT files in {args.out}" if args.dot else ""))
    return _EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(sub, config=True, out_required=True):
    if config:
        sub.add_argument("--config", help="JSON config with model/train/synth/eval sections")
        sub.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                         help="override one config value (repeatable)")
    if out_required is not None:
        sub.add_argument("--out", required=out_required, help="output directory")


def build_parser():
    parser = _Parser(prog="vsparse",
                     description="bipartite role-graph parser: synthesize, train, evaluate")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for data generation (default: all cores)")
    subs = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    p = subs.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--first-index", type=int, default=0,
                   help="index of the first scene (share a world across splits)")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="fit a model on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="recall protocols over a dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--protocols", nargs="+",
                   choices=["SGGen", "PhrDet", "SGCls", "PredCls"],
                   help="protocols to run (default: from config)")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("align", help="align one prediction against its ground truth")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--image-id", help="scene to align (default: first)")
    p.add_argument("--independent", action="store_true",
                   help="one-shot embedding-only baseline instead of iterative")
    p.set_defaults(func=cmd_align)

    p = subs.add_parser("convert", help="translate graph files between formats")
    p.add_argument("--to", choices=["sgg", "vsp"], required=True,
                   help="target format")
    p.add_argument("--input", required=True, help="source JSONL file")
    p.add_argument("--out", required=True, help="destination JSONL file")
    p.add_argument("--vocab", required=True, help="vocabulary JSON")
    p.set_defaults(func=cmd_convert)

    p = subs.add_parser("gradcheck", help="finite-difference audit of the model")
    _add_common(p, out_required=False)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entities", type=int, default=4, help="proposals in the probe scene")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("infer", help="predict graphs for a dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--dot", action="store_true", help="also write DOT files")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "subcommand", None):
            parser.print_help()
            return _EXIT_USAGE
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_USAGE
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return _EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return _EXIT_NUMERIC
    except VsparseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_FORMAT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
