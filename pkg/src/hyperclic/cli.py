"""Command-line entry point: ``hyperclic <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import embedding as emb
from . import experiment as exp
from . import metrics as met
from .errors import HyperclicError
from .hierarchy import balanced_tree, load_hierarchy, save_hierarchy
from .synthetic import SyntheticSpec, generate_synthetic, load_dataset, save_dataset


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise exp.ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise exp.ConfigError(f"{path}: expected a JSON object")
    return data


def _print(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_embed(args) -> int:
    tree = load_hierarchy(args.tree)
    cfg = emb.EmbedConfig(dim=args.dim, curvature=args.curvature, seed=args.seed)
    history: dict = {}
    protos = emb.run_stage1(tree, cfg, history)
    emb.save_prototypes(protos, args.out)
    after_cones = history.get("after_entailment", protos)
    _print(
        {
            "nodes": len(protos),
            "rank_correlation": emb.distance_rank_correlation(protos, tree),
            "cone_satisfaction_after_entailment": emb.cone_satisfaction(after_cones, tree, cfg.cone_k),
            "cone_satisfaction_final": emb.cone_satisfaction(protos, tree, cfg.cone_k),
        }
    )
    return 0


def cmd_gen_data(args) -> int:
    spec = exp._build(SyntheticSpec, _read_json(args.spec) if args.spec else {}, "synthetic")
    if args.seed is not None:
        spec.seed = args.seed
    tree = load_hierarchy(args.tree) if args.tree else balanced_tree(*exp.DEFAULT_SHAPE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = generate_synthetic(tree, spec)
    save_hierarchy(tree, out / "hierarchy.tsv")
    save_dataset(train, out / "train.tsv")
    save_dataset(test, out / "test.tsv")
    _print({"train_samples": len(train), "test_samples": len(test), "input_dim": spec.input_dim, "out": str(out)})
    return 0


def cmd_run(args) -> int:
    data = _read_json(args.config) if args.config else {}
    if args.method:
        data["method"] = args.method
    if args.out:
        data["output_dir"] = args.out
    cfg = exp.ExperimentConfig.from_dict(data)
    doc = exp.run_experiment(cfg)
    _print({"output_dir": str(exp.output_dir(cfg)), "summary": doc["summary"]})
    return 0


def cmd_evaluate(args) -> int:
    tree = load_hierarchy(args.tree)
    test = load_dataset(args.test)
    train = load_dataset(args.train) if args.train else None
    protos = emb.load_prototypes(args.prototypes) if args.prototypes else None
    result = exp.evaluate_checkpoint(tree, args.checkpoint, test, train, protos)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _print(result)
    return 0


def cmd_report(args) -> int:
    doc = met.read_report(args.metrics)
    acc = met.matrix_from_report(doc)
    if not acc.complete():
        raise exp.ConfigError(f"{args.metrics}: run is incomplete, grids have missing entries")
    mode = doc.get("config", {}).get("average_mode", "all")
    summary = met.summarize(acc, mode)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        for key, value in summary.items():
            if key == "final_per_task":
                for t, v in enumerate(value, 1):
                    w.writerow([f"final_instance_accuracy_task{t}", repr(v)])
            else:
                w.writerow([key, "" if value is None else value])
    if args.grids:
        met.write_csv(args.grids, acc)
    _print(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperclic", description="Hierarchical prototypes for continual learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed-hierarchy", help="embed a hierarchy file into the Poincaré ball")
    p.add_argument("--tree", required=True, help="hierarchy TSV (node_id, kind, parent_id)")
    p.add_argument("--out", required=True, help="prototype file to write")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--curvature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("gen-data", help="generate a synthetic hierarchical dataset")
    p.add_argument("--out", required=True, help="directory for hierarchy.tsv, train.tsv, test.tsv")
    p.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    p.add_argument("--tree", help="hierarchy TSV (default: 3 superclasses x 2 classes x 2 instances)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run a full experiment")
    p.add_argument("--config", help="experiment JSON (defaults used when omitted)")
    p.add_argument("--method", choices=exp.METHODS)
    p.add_argument("--out", help=f"output directory (env {exp.OUTPUT_ENV} takes precedence)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tree", required=True)
    p.add_argument("--test", required=True, help="dataset to evaluate on")
    p.add_argument("--train", help="training dataset the exemplar indices refer to")
    p.add_argument("--prototypes", help="prototype file, needed when the model keeps no memory")
    p.add_argument("--out", help="write the metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarize a metrics report as CSV")
    p.add_argument("--metrics", required=True, help="report.json from a run")
    p.add_argument("--out", required=True, help="summary CSV to write")
    p.add_argument("--grids", help="also write the per-(metric, task, after_task) CSV here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (HyperclicError, OSError, ValueError) as exc:
        print(f"hyperclic {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
