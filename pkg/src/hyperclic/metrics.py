"""Continual, hierarchy-aware evaluation metrics."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import HierarchyError, InvalidInputError
from .hierarchy import HierarchyTree

GRANULARITIES = ("instance", "class", "superclass")
METRICS = GRANULARITIES + ("lca",)
AVERAGE_MODES = ("all", "seen_only")


@dataclass(frozen=True)
class PredictionRecord:
    true_id: str
    pred_id: str
    task: int = 0
    after: int = 0


def _check(records):
    if not records:
        raise InvalidInputError("no prediction records")


def instance_accuracy(records) -> float:
    _check(records)
    return float(np.mean([r.pred_id == r.true_id for r in records]))


def _ancestor_accuracy(records, tree: HierarchyTree, level: int) -> float:
    _check(records)
    hits = []
    for r in records:
        anc_t = tree.ancestors(r.true_id)
        anc_p = tree.ancestors(r.pred_id)
        if len(anc_t) < level or len(anc_p) < level:
            bad = r.true_id if len(anc_t) < level else r.pred_id
            raise HierarchyError(f"node {bad!r} has no ancestor {level} levels up")
        hits.append(anc_t[level - 1] == anc_p[level - 1])
    return float(np.mean(hits))


def class_accuracy(records, tree: HierarchyTree) -> float:
    """Fraction of predictions sharing the true instance's parent."""
    return _ancestor_accuracy(records, tree, 1)


def superclass_accuracy(records, tree: HierarchyTree) -> float:
    """Fraction of predictions sharing the true instance's grandparent."""
    return _ancestor_accuracy(records, tree, 2)


def lca_severity(records, tree: HierarchyTree) -> tuple[float, bool]:
    """Mean edges from each wrong prediction up to its LCA with the truth.

    Returns ``(severity, all_correct)``; severity is 0 when nothing is wrong.
    """
    wrong = [r for r in records if r.pred_id != r.true_id]
    if not wrong:
        return 0.0, True
    steps = []
    for r in wrong:
        p = tree.idx(r.pred_id)
        m = tree.lca_index(p, r.true_id)
        steps.append(int(tree.depth[p] - tree.depth[m]))
    return float(np.mean(steps)), False


@dataclass
class AccuracyMatrix:
    """Per-metric ``T x T`` grids; entry ``[i, j]`` is task ``i`` after training task ``j``."""

    T: int
    grids: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError("T must be >= 1")
        for name in METRICS:
            self.grids.setdefault(name, np.full((self.T, self.T), np.nan))

    def record(self, records, tree: HierarchyTree, i: int, j: int) -> None:
        g = self.grids
        g["instance"][i, j] = instance_accuracy(records)
        g["class"][i, j] = class_accuracy(records, tree)
        g["superclass"][i, j] = superclass_accuracy(records, tree)
        g["lca"][i, j] = lca_severity(records, tree)[0]

    def complete(self) -> bool:
        return all(not np.any(np.isnan(v)) for v in self.grids.values())


def average_mean(matrix, mode: str = "all") -> float:
    """Mean over all ``T²`` entries (``all``) or over entries with ``i <= j`` (``seen_only``)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError("expected a square matrix")
    if mode == "all":
        return float(m.sum() / m.size)
    if mode == "seen_only":
        return float(m[np.triu_indices(len(m))].mean())
    raise InvalidInputError(f"unknown mode {mode!r}; expected one of {AVERAGE_MODES}")


def average_forgetting(matrix) -> float:
    """``1/(T-1) sum_{i<T} [max_{i<=j<T} A[i, j] - A[i, T]]`` (may be negative)."""
    m = np.asarray(matrix, dtype=np.float64)
    T = len(m)
    if T < 2:
        raise InvalidInputError("forgetting needs at least two tasks")
    drops = [m[i, i : T - 1].max() - m[i, T - 1] for i in range(T - 1)]
    return float(np.mean(drops))


def final_per_task(matrix) -> np.ndarray:
    """Accuracy on every task after the last one."""
    return np.asarray(matrix, dtype=np.float64)[:, -1].copy()


def summarize(acc: AccuracyMatrix, mode: str = "all") -> dict:
    """Aggregate scalars; forgetting is ``None`` when ``T == 1``."""
    out = {"average_mode": mode}
    for name in GRANULARITIES:
        out[f"average_{name}_accuracy"] = average_mean(acc.grids[name], mode)
        out[f"average_{name}_accuracy_seen_only"] = average_mean(acc.grids[name], "seen_only")
    out["average_lca"] = average_mean(acc.grids["lca"], mode)
    out["forgetting"] = average_forgetting(acc.grids["instance"]) if acc.T >= 2 else None
    out["final_per_task"] = final_per_task(acc.grids["instance"]).tolist()
    return out


def write_report(path: str | os.PathLike, config: dict, acc: AccuracyMatrix, extra: dict | None = None) -> dict:
    """Write the JSON metrics report and return the document."""
    doc = {
        "config": config,
        "T": acc.T,
        "grids": {k: [[None if np.isnan(v) else float(v) for v in row] for row in g] for k, g in acc.grids.items()},
        "summary": summarize(acc, config.get("average_mode", "all")) if acc.complete() else None,
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def read_report(path: str | os.PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: not a JSON report ({exc})") from None
    if "grids" not in doc or "T" not in doc:
        raise InvalidInputError(f"{path}: missing 'grids' or 'T'")
    return doc


def matrix_from_report(doc: dict) -> AccuracyMatrix:
    grids = {k: np.array([[np.nan if v is None else v for v in row] for row in g], dtype=np.float64)
             for k, g in doc["grids"].items()}
    return AccuracyMatrix(int(doc["T"]), grids)


def write_csv(path: str | os.PathLike, acc: AccuracyMatrix) -> None:
    """One row per ``(metric, i, j)`` with 1-based task numbers."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "task", "after_task", "value"])
        for name in METRICS:
            g = acc.grids[name]
            for i in range(acc.T):
                for j in range(acc.T):
                    w.writerow([name, i + 1, j + 1, "" if np.isnan(g[i, j]) else repr(float(g[i, j]))])
