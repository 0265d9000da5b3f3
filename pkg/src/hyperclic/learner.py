"""Continual learner on frozen hyperbolic prototypes.

A small perceptron maps inputs to tangent vectors at the origin, the
exponential map carries them into the ball, and each instance is scored by
its negative hyperbolic distance to that instance's prototype. Old
knowledge is retained with a herding exemplar memory and distillation
against a frozen copy of the previous model. Backpropagation is written
out by hand.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from . import geometry as geo
from .errors import ConfigError, InvalidInputError, MemoryBudgetError, TrainingError
from .geometry import BallConfig

logger = logging.getLogger(__name__)

DISTILLATION_KINDS = ("cross_entropy", "kl_divergence", "mse")
CHECKPOINT_VERSION = 1


@dataclass
class LearnerConfig:
    temperature: float = 0.1
    lam: float = 0.5
    epochs: int = 3
    batch_size: int = 16
    lr: float = 0.05
    memory_budget: int | None = None
    distillation: str = "cross_entropy"
    hidden: tuple[int, ...] = (64, 64)
    distill_current: bool = False
    normalize_features: bool = False
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.distillation not in DISTILLATION_KINDS:
            raise ConfigError(f"distillation must be one of {DISTILLATION_KINDS}, got {self.distillation!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.memory_budget is not None and self.memory_budget < 0:
            raise ConfigError("memory_budget must be non-negative")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden layer sizes must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


# -- feature extractor --------------------------------------------------


class FeatureExtractor:
    """Multilayer perceptron with ReLU hidden layers and a linear output."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise InvalidInputError("need matching, non-empty weight and bias lists")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for w, b, nxt in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError("weight/bias shapes do not match")
            if nxt is not None and nxt.shape[0] != w.shape[1]:
                raise InvalidInputError("consecutive layer sizes do not match")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise InvalidInputError("non-finite parameters")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "FeatureExtractor":
        """He-initialised layers for ``sizes = [input_dim, *hidden, output_dim]``."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigError(f"invalid layer sizes {sizes}")
        weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(sizes, sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray, keep: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise InvalidInputError(f"input dim {x.shape[-1]} != extractor input dim {self.sizes[0]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients in :meth:`params` order, given d(loss)/d(output)."""
        grads_w, grads_b = [], []
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            grads_w.append(acts[i].T @ g)
            grads_b.append(g.sum(axis=0))
            g = g @ self.weights[i].T
        grads_w.reverse()
        grads_b.reverse()
        return [p for pair in zip(grads_w, grads_b) for p in pair]

    def apply(self, grads: list[np.ndarray], lr: float) -> None:
        for p, g in zip(self.params(), grads):
            p -= lr * g


def embed(x, model: FeatureExtractor, ball: BallConfig = geo.DEFAULT_BALL) -> np.ndarray:
    """Ball points ``exp_0(φ(x))``."""
    return geo.exp_map_zero(model.forward(x), ball)


def hyperbolic_logits(z, prototypes: np.ndarray, temperature: float, ball: BallConfig = geo.DEFAULT_BALL) -> np.ndarray:
    """``-d(z, P_y) / τ`` for every prototype row ``P_y``."""
    if len(prototypes) == 0:
        raise InvalidInputError("no prototypes")
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    z = np.asarray(z, dtype=np.float64)
    d = geo.hyperbolic_distance(z[..., None, :], prototypes, ball)
    return -np.asarray(d) / temperature


def _logits_forward(x, model, prototypes, temperature, ball):
    phi, acts = model.forward(x, keep=True)
    z = geo.exp_map_zero(phi, ball)
    logits = hyperbolic_logits(z, prototypes, temperature, ball)
    return logits, (phi, acts, z)


def _logits_backward(model, cache, prototypes, temperature, ball, grad_logits):
    phi, acts, z = cache
    gz, _ = geo.distance_gradient_safe(z[:, None, :], prototypes[None, :, :], ball)
    grad_z = np.einsum("bk,bkd->bd", -grad_logits / temperature, gz)
    grad_phi = geo.exp_map_zero_vjp(phi, grad_z, ball)
    return model.backward(acts, grad_phi)


def classification_loss(x, labels, model, prototypes, temperature, ball: BallConfig = geo.DEFAULT_BALL):
    """Mean cross-entropy of softmaxed hyperbolic logits; returns ``(loss, grads)``.

    ``labels`` index rows of ``prototypes``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= len(prototypes)):
        raise InvalidInputError("label out of range")
    logits, cache = _logits_forward(x, model, prototypes, temperature, ball)
    logp = log_softmax(logits, axis=1)
    n = len(labels)
    loss = float(-np.mean(logp[np.arange(n), labels]))
    grad_logits = np.exp(logp)
    grad_logits[np.arange(n), labels] -= 1.0
    grad_logits /= n
    return loss, _logits_backward(model, cache, prototypes, temperature, ball, grad_logits)


def _distil_terms(student, teacher, kind):
    n = len(student)
    if kind == "mse":
        diff = student - teacher
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    logp_s = log_softmax(student, axis=1)
    logp_t = log_softmax(teacher, axis=1)
    p_t = np.exp(logp_t)
    if kind == "cross_entropy":
        loss = -np.sum(p_t * logp_s) / n
    else:
        loss = np.sum(p_t * (logp_t - logp_s)) / n
    # both kinds share the gradient softmax(student) - teacher
    return float(loss), (np.exp(logp_s) - p_t) / n


def distillation_loss(
    x,
    model,
    snapshot,
    old_prototypes,
    temperature,
    kind: str = "cross_entropy",
    ball: BallConfig = geo.DEFAULT_BALL,
):
    """Match the frozen ``snapshot``'s logits over old prototypes; returns ``(loss, grads)``."""
    if snapshot is None:
        raise TrainingError("distillation needs a snapshot of the previous model")
    if kind not in DISTILLATION_KINDS:
        raise ConfigError(f"unknown distillation kind {kind!r}")
    teacher, _ = _logits_forward(x, snapshot, old_prototypes, temperature, ball)
    student, cache = _logits_forward(x, model, old_prototypes, temperature, ball)
    loss, grad_logits = _distil_terms(student, teacher, kind)
    return loss, _logits_backward(model, cache, old_prototypes, temperature, ball, grad_logits)


# -- state and memory ----------------------------------------------------


@dataclass
class ModelState:
    current: FeatureExtractor
    snapshot: FeatureExtractor | None = None
    seen: list[int] = field(default_factory=list)
    task_index: int = 0


@dataclass
class ExemplarMemory:
    """Per-instance exemplars in herding order.

    ``indices`` refer to rows of the dataset the inputs came from, which is
    what gets serialised.
    """

    budget: int
    inputs: dict[int, np.ndarray] = field(default_factory=dict)
    indices: dict[int, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.indices.values())

    def arrays(self):
        """All stored inputs and their labels, labels ascending."""
        labels = sorted(self.inputs)
        if not labels:
            return None, np.zeros(0, dtype=np.int64)
        xs = np.concatenate([self.inputs[y] for y in labels])
        ys = np.concatenate([np.full(len(self.inputs[y]), y, dtype=np.int64) for y in labels])
        return xs, ys


def herding_select(features, m: int) -> list[int]:
    """Greedy mean-matching exemplar order; ties go to the lowest index."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise InvalidInputError("features must be a non-empty 2-D array")
    if m < 1:
        raise InvalidInputError(f"m must be >= 1, got {m}")
    mu = feats.mean(axis=0)
    available = np.ones(len(feats), dtype=bool)
    running = np.zeros_like(mu)
    chosen: list[int] = []
    for k in range(min(m, len(feats))):
        dist = np.linalg.norm(mu - (running + feats) / (k + 1), axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running += feats[i]
    return chosen


def _features(x, model: FeatureExtractor, normalize: bool) -> np.ndarray:
    f = model.forward(x)
    if normalize:
        f = f / np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), 1e-12)
    return f


def update_memory(memory: ExemplarMemory, x, labels, sample_ids, state: ModelState, normalize: bool = False):
    """Shrink old exemplar lists and add herding selections for new instances."""
    labels = np.asarray(labels, dtype=np.int64)
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    seen = set(state.seen) | set(memory.inputs) | set(labels.tolist())
    quota = memory.budget // len(seen)
    if quota < 1:
        raise MemoryBudgetError(f"budget {memory.budget} is smaller than {len(seen)} seen instances")
    out = ExemplarMemory(memory.budget)
    for y in sorted(memory.inputs):
        out.inputs[y] = memory.inputs[y][:quota].copy()
        out.indices[y] = memory.indices[y][:quota].copy()
    x = np.asarray(x, dtype=np.float64)
    for y in np.unique(labels):
        mask = labels == y
        order = herding_select(_features(x[mask], state.current, normalize), quota)
        out.inputs[int(y)] = x[mask][order]
        out.indices[int(y)] = sample_ids[mask][order]
    return out


def exemplar_means(memory: ExemplarMemory, model: FeatureExtractor, normalize: bool = False):
    labels = sorted(y for y in memory.inputs if len(memory.inputs[y]))
    means = np.array([_features(memory.inputs[y], model, normalize).mean(axis=0) for y in labels])
    return labels, means


def nme_predict(x, memory: ExemplarMemory, model: FeatureExtractor, normalize: bool = False) -> np.ndarray:
    """Label of the nearest exemplar mean in feature space; ties go to the lowest label."""
    labels, means = exemplar_means(memory, model, normalize)
    if not labels:
        raise InvalidInputError("exemplar memory is empty")
    feats = _features(np.atleast_2d(x), model, normalize)
    dist = np.linalg.norm(feats[:, None, :] - means[None, :, :], axis=-1)
    return np.asarray(labels, dtype=np.int64)[np.argmin(dist, axis=1)]


def prototype_predict(x, model, prototypes, labels, ball: BallConfig = geo.DEFAULT_BALL) -> np.ndarray:
    """Label of the nearest prototype among ``labels`` (used when no memory is kept)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = embed(np.atleast_2d(x), model, ball)
    d = geo.hyperbolic_distance(z[:, None, :], prototypes[labels][None, :, :], ball)
    return labels[np.argmin(d, axis=1)]


# -- training ------------------------------------------------------------


def new_state(input_dim: int, prototype_dim: int, cfg: LearnerConfig) -> ModelState:
    rng = np.random.default_rng(cfg.seed)
    return ModelState(FeatureExtractor.init([input_dim, *cfg.hidden, prototype_dim], rng))


def combined_step(
    x,
    labels,
    is_exemplar,
    state: ModelState,
    prototypes,
    active,
    old,
    cfg: LearnerConfig,
    ball: BallConfig,
):
    """Loss and gradients of ``λ L_distil + (1 - λ) L_cls`` on one batch.

    ``active`` and ``old`` are the prototype rows used for classification
    and distillation; ``labels`` are positions within ``active``.
    """
    model = state.current
    use_distil = state.snapshot is not None and len(old) > 0
    w_cls = 1.0 - cfg.lam if use_distil else 1.0
    total = 0.0
    grads = [np.zeros_like(p) for p in model.params()]
    if w_cls > 0:
        loss, g = classification_loss(x, labels, model, prototypes[active], cfg.temperature, ball)
        total += w_cls * loss
        grads = [a + w_cls * b for a, b in zip(grads, g)]
    if use_distil and cfg.lam > 0:
        mask = np.ones(len(x), dtype=bool) if cfg.distill_current else np.asarray(is_exemplar, dtype=bool)
        if np.any(mask):
            loss, g = distillation_loss(
                x[mask], model, state.snapshot, prototypes[old], cfg.temperature, cfg.distillation, ball
            )
            total += cfg.lam * loss
            grads = [a + cfg.lam * b for a, b in zip(grads, g)]
    return total, grads


def train_task(
    state: ModelState,
    x,
    labels,
    memory: ExemplarMemory | None,
    prototypes,
    cfg: LearnerConfig,
    ball: BallConfig = geo.DEFAULT_BALL,
    history: list | None = None,
) -> ModelState:
    """Train on one task and return the new state.

    ``labels`` index rows of ``prototypes`` (instance prototypes in tree
    order). The previous model is frozen as the distillation teacher.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise InvalidInputError("empty task data")
    new_labels = sorted(set(labels.tolist()))
    clash = set(new_labels) & set(state.seen)
    if clash:
        raise InvalidInputError(f"task labels already seen: {sorted(clash)[:5]}")
    task_index = state.task_index + 1
    snapshot = state.current.copy() if task_index >= 2 else None
    old = list(state.seen)
    seen = old + new_labels
    out = ModelState(state.current.copy(), snapshot, seen, task_index)

    mem_x, mem_y = memory.arrays() if memory is not None else (None, np.zeros(0, dtype=np.int64))
    if mem_x is not None and len(mem_x):
        all_x = np.concatenate([x, mem_x])
        all_y = np.concatenate([labels, mem_y])
        is_ex = np.concatenate([np.zeros(len(x), bool), np.ones(len(mem_x), bool)])
    else:
        all_x, all_y, is_ex = x, labels, np.zeros(len(x), bool)
    active = np.array(seen, dtype=np.int64)
    position = {y: i for i, y in enumerate(seen)}
    target = np.array([position[int(y)] for y in all_y], dtype=np.int64)
    old_rows = np.array(old, dtype=np.int64)

    rng = np.random.default_rng([cfg.seed, task_index])
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(all_x))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            loss, grads = combined_step(all_x[b], target[b], is_ex[b], out, prototypes, active, old_rows, cfg, ball)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in task {task_index}, epoch {epoch}")
            out.current.apply(grads, cfg.lr)
            epoch_loss += loss * len(b)
        if history is not None:
            history.append(epoch_loss / len(order))
        logger.debug("task %d epoch %d loss %.5f", task_index, epoch, epoch_loss / len(order))
    return out


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(state: ModelState, memory: ExemplarMemory | None, path: str | os.PathLike) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "sizes": state.current.sizes,
        "weights": [w.tolist() for w in state.current.weights],
        "biases": [b.tolist() for b in state.current.biases],
        "seen": list(map(int, state.seen)),
        "task_index": state.task_index,
        "memory": None
        if memory is None
        else {"budget": memory.budget, "indices": {str(y): v.tolist() for y, v in sorted(memory.indices.items())}},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str | os.PathLike, dataset_x=None):
    """Return ``(state, memory)``; memory inputs are rebuilt from ``dataset_x`` if given."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: not a checkpoint ({exc})") from None
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    model = FeatureExtractor([np.array(w) for w in doc["weights"]], [np.array(b) for b in doc["biases"]])
    state = ModelState(model, None, [int(y) for y in doc["seen"]], int(doc["task_index"]))
    memory = None
    if doc.get("memory") is not None:
        memory = ExemplarMemory(int(doc["memory"]["budget"]))
        for key, idx in doc["memory"]["indices"].items():
            memory.indices[int(key)] = np.asarray(idx, dtype=np.int64)
            if dataset_x is not None:
                memory.inputs[int(key)] = np.asarray(dataset_x)[memory.indices[int(key)]]
    return state, memory
