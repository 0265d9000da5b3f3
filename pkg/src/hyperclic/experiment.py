"""End-to-end runs: hierarchy embedding, continual training, evaluation and reports."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import embedding as emb
from . import learner as lrn
from . import metrics as met
from .errors import ConfigError
from .hierarchy import HierarchyTree, balanced_tree, load_hierarchy, save_hierarchy
from .synthetic import Dataset, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split_tasks

logger = logging.getLogger(__name__)

METHODS = ("hyperclic", "naive", "replay_no_distill")
OUTPUT_ENV = "HYPERCLIC_OUTPUT_DIR"
# default stream: 3 superclasses, 6 classes, 12 instances
DEFAULT_SHAPE = (3, 2, 2)
MEMORY_PER_INSTANCE = 5


def _build(cls, data: dict | None, what: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
    return cls(**data)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run.

    ``hierarchy``, ``train_data`` and ``test_data`` are file paths; when
    omitted a balanced tree and synthetic data from ``synthetic`` are used.
    """

    hierarchy: str | None = None
    train_data: str | None = None
    test_data: str | None = None
    embed: emb.EmbedConfig = field(default_factory=emb.EmbedConfig)
    learner: lrn.LearnerConfig = field(default_factory=lrn.LearnerConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    tasks: int = 3
    method: str = "hyperclic"
    output_dir: str = "runs/default"
    average_mode: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.tasks < 1:
            raise ConfigError("tasks must be >= 1")
        if self.average_mode not in met.AVERAGE_MODES:
            raise ConfigError(f"average_mode must be one of {met.AVERAGE_MODES}")
        if (self.train_data is None) != (self.test_data is None):
            raise ConfigError("give both train_data and test_data, or neither")
        for name in ("hierarchy", "train_data", "test_data"):
            path = getattr(self, name)
            if path is not None and not os.path.isfile(path):
                raise ConfigError(f"{name} file not found: {path}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        nested = {
            "embed": (emb.EmbedConfig, "embed"),
            "learner": (lrn.LearnerConfig, "learner"),
            "synthetic": (SyntheticSpec, "synthetic"),
        }
        for key, (sub, what) in nested.items():
            if key in data:
                data[key] = _build(sub, data[key], what)
        return _build(cls, data, "experiment")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["learner"] = self.learner.to_dict()
        return out


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return ExperimentConfig.from_dict(data)


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def method_learner_config(cfg: ExperimentConfig, n_instances: int) -> tuple[lrn.LearnerConfig, bool]:
    """Learner config after applying the method, and whether memory is kept."""
    lc = lrn.LearnerConfig(**cfg.learner.to_dict())
    if lc.memory_budget is None:
        lc.memory_budget = MEMORY_PER_INSTANCE * n_instances
    if cfg.method == "naive":
        lc.lam = 0.0
        return lc, False
    if cfg.method == "replay_no_distill":
        lc.lam = 0.0
    return lc, True


def predict(state, memory, prototypes, x, ball) -> np.ndarray:
    """Nearest exemplar mean when memory exists, otherwise nearest seen prototype."""
    if memory is not None and len(memory):
        return lrn.nme_predict(x, memory, state.current)
    return lrn.prototype_predict(x, state.current, prototypes, state.seen, ball)


def evaluate_records(tree, labels_to_ids, pred, truth, task, after):
    return [
        met.PredictionRecord(labels_to_ids[int(t)], labels_to_ids[int(p)], task, after)
        for t, p in zip(truth, pred)
    ]


def _inputs(cfg: ExperimentConfig, out: Path) -> tuple[HierarchyTree, Dataset, Dataset]:
    tree = load_hierarchy(cfg.hierarchy) if cfg.hierarchy else balanced_tree(*DEFAULT_SHAPE)
    if cfg.train_data:
        train, test = load_dataset(cfg.train_data), load_dataset(cfg.test_data)
    else:
        train, test = generate_synthetic(tree, cfg.synthetic)
        save_dataset(train, out / "train.tsv")
        save_dataset(test, out / "test.tsv")
    save_hierarchy(tree, out / "hierarchy.tsv")
    if train.x.shape[1] != test.x.shape[1]:
        raise ConfigError("train and test feature dimensions differ")
    return tree, train, test


def run_experiment(cfg: ExperimentConfig, record_sink: list | None = None) -> dict:
    """Run stage 1, then the task loop, writing artifacts after every task.

    Returns the final report document. When ``record_sink`` is given, every
    evaluation's prediction records are appended to it.
    """
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    tree, train, test = _inputs(cfg, out)

    protos = emb.run_stage1(tree, cfg.embed)
    emb.save_prototypes(protos, out / "prototypes.tsv")
    diagnostics = {
        "rank_correlation": emb.distance_rank_correlation(protos, tree),
        "cone_satisfaction": emb.cone_satisfaction(protos, tree, cfg.embed.cone_k),
    }
    leaves = emb.extract_leaf_prototypes(protos, tree).points
    ball = cfg.embed.ball
    ids = [tree.node_ids[i] for i in tree.instances]

    stream = split_tasks(train, test, tree, cfg.tasks, cfg.seed)
    y_train, y_test = train.labels(tree), test.labels(tree)
    lc, keep_memory = method_learner_config(cfg, len(ids))
    state = lrn.new_state(train.x.shape[1], cfg.embed.dim, lc)
    memory = lrn.ExemplarMemory(lc.memory_budget) if keep_memory else None
    acc = met.AccuracyMatrix(stream.T)
    extra = {
        "method": cfg.method,
        "stage1": diagnostics,
        "tasks": stream.tasks,
        "memory_budget": lc.memory_budget if keep_memory else 0,
    }

    for j in range(stream.T):
        tr = stream.train_idx[j]
        state = lrn.train_task(state, train.x[tr], y_train[tr], memory, leaves, lc, ball)
        if memory is not None:
            memory = lrn.update_memory(memory, train.x[tr], y_train[tr], tr, state, lc.normalize_features)
        for i in range(stream.T):
            te = stream.test_idx[i]
            pred = predict(state, memory, leaves, test.x[te], ball)
            records = evaluate_records(tree, ids, pred, y_test[te], i, j)
            acc.record(records, tree, i, j)
            if record_sink is not None:
                record_sink.extend(records)
        lrn.save_checkpoint(state, memory, out / "checkpoint.json")
        doc = met.write_report(out / "report.json", cfg.to_dict() | {"average_mode": cfg.average_mode}, acc, extra)
        met.write_csv(out / "report.csv", acc)
        logger.info("task %d/%d done: instance acc %s", j + 1, stream.T, acc.grids["instance"][:, j].round(3).tolist())
    return doc


def evaluate_checkpoint(tree, checkpoint, test: Dataset, train: Dataset | None = None, prototypes=None, ball=None):
    """Accuracies and LCA severity of a saved model on ``test``."""
    state, memory = lrn.load_checkpoint(checkpoint, None if train is None else train.x)
    if memory is not None and train is None:
        raise ConfigError("checkpoint keeps exemplar memory; the training dataset is needed to rebuild it")
    if memory is None and prototypes is None:
        raise ConfigError("checkpoint has no memory; prototypes are needed for prediction")
    ids = [tree.node_ids[i] for i in tree.instances]
    leaves = None
    if prototypes is not None:
        leaves = emb.extract_leaf_prototypes(prototypes, tree).points
        ball = prototypes.ball
    y = test.labels(tree)
    pred = predict(state, memory, leaves, test.x, ball)
    records = evaluate_records(tree, ids, pred, y, 0, 0)
    severity, all_correct = met.lca_severity(records, tree)
    return {
        "samples": len(records),
        "instance_accuracy": met.instance_accuracy(records),
        "class_accuracy": met.class_accuracy(records, tree),
        "superclass_accuracy": met.superclass_accuracy(records, tree),
        "lca_severity": severity,
        "all_correct": all_correct,
    }
