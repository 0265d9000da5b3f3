"""Synthetic hierarchical data and class-incremental task streams."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, HierarchyError, InvalidInputError
from .hierarchy import HierarchyTree


@dataclass
class SyntheticSpec:
    """Gaussian centres nested along the tree, one sample cloud per instance.

    Each superclass centre is drawn around the origin with scale
    ``sigma_superclass``, each class centre around its superclass with
    ``sigma_class`` and each instance centre around its class with
    ``sigma_instance``; samples scatter around their instance with
    ``sigma_sample``.
    """

    input_dim: int = 32
    samples_per_instance: int = 100
    train_fraction: float = 0.75
    test_fraction: float = 0.25
    sigma_superclass: float = 0.2
    sigma_class: float = 0.1
    sigma_instance: float = 0.05
    sigma_sample: float = 0.125
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.samples_per_instance < 2:
            raise ConfigError("input_dim must be >= 1 and samples_per_instance >= 2")
        if not abs(self.train_fraction + self.test_fraction - 1.0) < 1e-12:
            raise ConfigError("train_fraction and test_fraction must sum to 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if not self.sigma_superclass > self.sigma_class > self.sigma_instance > 0:
            raise ConfigError("need sigma_superclass > sigma_class > sigma_instance > 0")
        if self.sigma_sample < 0:
            raise ConfigError("sigma_sample must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """Feature rows with the instance node id of each row."""

    x: np.ndarray
    instance_ids: list[str]

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or len(self.x) != len(self.instance_ids):
            raise InvalidInputError("features must be (n_samples, input_dim) with one id per row")

    def __len__(self) -> int:
        return len(self.instance_ids)

    def labels(self, tree: HierarchyTree) -> np.ndarray:
        """Position of each row's instance within ``tree.instances``."""
        pos = {tree.node_ids[i]: k for k, i in enumerate(tree.instances)}
        try:
            return np.array([pos[i] for i in self.instance_ids], dtype=np.int64)
        except KeyError as exc:
            raise HierarchyError(f"dataset instance {exc.args[0]!r} is not an instance node of the tree") from None


def _centres(tree: HierarchyTree, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    scale = {"superclass": spec.sigma_superclass, "class": spec.sigma_class, "instance": spec.sigma_instance}
    centres = np.zeros((len(tree), spec.input_dim))
    for v in tree.bfs_order():
        p = tree.parent[v]
        base = centres[p] if p >= 0 else np.zeros(spec.input_dim)
        sigma = scale.get(tree.kinds[v], 0.0 if p < 0 else spec.sigma_superclass)
        centres[v] = base + rng.normal(0.0, sigma, size=spec.input_dim) if sigma > 0 else base
    return centres


def generate_synthetic(tree: HierarchyTree, spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn around nested Gaussian centres; deterministic under ``spec.seed``."""
    if not tree.instances:
        raise HierarchyError("tree has no instance nodes")
    rng = np.random.default_rng(spec.seed)
    centres = _centres(tree, spec, rng)
    n_train = int(round(spec.samples_per_instance * spec.train_fraction))
    n_train = min(max(n_train, 1), spec.samples_per_instance - 1)
    train_x, train_ids, test_x, test_ids = [], [], [], []
    for i in tree.instances:
        pts = centres[i] + rng.normal(0.0, spec.sigma_sample, size=(spec.samples_per_instance, spec.input_dim))
        nid = tree.node_ids[i]
        train_x.append(pts[:n_train])
        test_x.append(pts[n_train:])
        train_ids += [nid] * n_train
        test_ids += [nid] * (spec.samples_per_instance - n_train)
    return Dataset(np.concatenate(train_x), train_ids), Dataset(np.concatenate(test_x), test_ids)


def save_dataset(data: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(data)}\t{data.x.shape[1]}\n")
        for nid, row in zip(data.instance_ids, data.x):
            fh.write(nid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        try:
            n, d = int(header[0]), int(header[1])
        except (ValueError, IndexError):
            raise InvalidInputError(f"{path}: header must be 'n_samples<TAB>input_dim'") from None
        ids, rows = [], []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != d + 1:
                raise InvalidInputError(f"{path}:{lineno}: expected {d} features, got {len(parts) - 1}")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: non-numeric feature") from None
            ids.append(parts[0])
    if len(ids) != n:
        raise InvalidInputError(f"{path}: header says {n} samples, found {len(ids)}")
    return Dataset(np.array(rows, dtype=np.float64).reshape(n, d), ids)


@dataclass
class TaskStream:
    """Disjoint instance groups, one per task, with per-task row indices."""

    tasks: list[list[str]]
    train_idx: list[np.ndarray]
    test_idx: list[np.ndarray]

    @property
    def T(self) -> int:
        return len(self.tasks)

    def check_disjoint(self) -> None:
        seen: set[str] = set()
        for t, group in enumerate(self.tasks):
            clash = seen & set(group)
            if clash:
                raise InvalidInputError(f"task {t + 1} repeats instances {sorted(clash)[:5]}")
            seen |= set(group)


def split_instances(instance_ids, T: int, seed: int) -> list[list[str]]:
    """Shuffle instances and cut them into ``T`` groups whose sizes differ by at most one."""
    ids = list(instance_ids)
    if T < 1:
        raise ConfigError("T must be >= 1")
    if T > len(ids):
        raise ConfigError(f"cannot split {len(ids)} instances into {T} tasks")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[k] for k in part] for part in np.array_split(order, T)]


def split_tasks(train: Dataset, test: Dataset, tree: HierarchyTree, T: int, seed: int) -> TaskStream:
    groups = split_instances([tree.node_ids[i] for i in tree.instances], T, seed)
    train_ids = np.asarray(train.instance_ids)
    test_ids = np.asarray(test.instance_ids)
    stream = TaskStream(
        groups,
        [np.flatnonzero(np.isin(train_ids, g)) for g in groups],
        [np.flatnonzero(np.isin(test_ids, g)) for g in groups],
    )
    stream.check_disjoint()
    for t, (tr, te) in enumerate(zip(stream.train_idx, stream.test_idx)):
        if len(tr) == 0 or len(te) == 0:
            raise InvalidInputError(f"task {t + 1} has no training or no test samples")
    return stream
