"""Hyperbolic prototypes for every node of a hierarchy.

Three sequential phases: a Poincaré-embedding softmax loss, a max-margin
entailment-cone loss, and a cosine separation loss. All gradients are
closed form; phases 1 and 2 use Riemannian SGD with projection back into
the ball after every step.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import spearmanr

from . import geometry as geo
from .errors import ConeUndefinedError, ConfigError, InvalidInputError, TrainingError
from .geometry import BallConfig
from .hierarchy import HierarchyTree

logger = logging.getLogger(__name__)

# cone apexes are kept at least this far outside the inner radius K
APEX_MARGIN = 1e-3
# distinct nodes sharing coordinates are nudged apart by this much
COINCIDENT_NUDGE = 1e-9
# floor on sin² of the cone angle inside its derivative
SIN2_FLOOR = 1e-30


@dataclass
class EmbedConfig:
    dim: int = 64
    curvature: float = 1.0
    poincare_epochs: int = 150
    entailment_epochs: int = 50
    separation_epochs: int = 500
    poincare_lr: float = 0.3
    entailment_lr: float = 0.01
    separation_lr: float = 1.0
    burn_in_epochs: int = 10
    burn_in_factor: float = 0.1
    margin: float = 0.01
    negatives: int = 10
    batch_size: int = 10
    cone_k: float = 0.1
    init_radius: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("poincare_epochs", "entailment_epochs", "separation_epochs", "burn_in_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if self.negatives < 1 or self.batch_size < 1:
            raise ConfigError("negatives and batch_size must be >= 1")
        if not 0 < self.cone_k < 1:
            raise ConfigError("cone_k must lie in (0, 1)")

    @property
    def ball(self) -> BallConfig:
        return BallConfig(c=self.curvature, dim=self.dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PrototypeSet:
    """One point in the ball per node, rows ordered as ``node_order``."""

    points: np.ndarray
    node_order: list[str]
    ball: BallConfig = field(default_factory=BallConfig)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) != len(self.node_order):
            raise InvalidInputError("points must be (n_nodes, dim) and match node_order")
        if np.any(self.ball.c * np.sum(self.points**2, axis=1) >= 1.0):
            raise InvalidInputError("prototype outside the open ball")

    def __len__(self) -> int:
        return len(self.node_order)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, indices) -> "PrototypeSet":
        indices = list(indices)
        return PrototypeSet(self.points[indices].copy(), [self.node_order[i] for i in indices], self.ball)

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.points.copy(), list(self.node_order), self.ball)


def save_prototypes(protos: PrototypeSet, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{protos.dim}\t{protos.ball.c!r}\t{len(protos)}\n")
        for nid, row in zip(protos.node_order, protos.points):
            fh.write(nid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def load_prototypes(path: str | os.PathLike, boundary_eps: float = 1e-5) -> PrototypeSet:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) != 3:
            raise InvalidInputError(f"{path}: bad header")
        try:
            dim, c, count = int(header[0]), float(header[1]), int(header[2])
        except ValueError:
            raise InvalidInputError(f"{path}: bad header {header!r}") from None
        ids, rows = [], []
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != dim + 1:
                raise InvalidInputError(f"{path}: expected {dim} coordinates for {parts[0]!r}")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    if len(ids) != count:
        raise InvalidInputError(f"{path}: header says {count} nodes, found {len(ids)}")
    return PrototypeSet(np.array(rows).reshape(count, dim), ids, BallConfig(c=c, boundary_eps=boundary_eps, dim=dim))


def init_prototypes(tree: HierarchyTree, cfg: EmbedConfig) -> PrototypeSet:
    """Uniform samples from a ball of radius ``cfg.init_radius``."""
    rng = np.random.default_rng(cfg.seed)
    n, d = len(tree), cfg.dim
    direction = rng.normal(size=(n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = cfg.init_radius * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return PrototypeSet(direction * radius, list(tree.node_ids), cfg.ball)


# -- phase 1: Poincaré softmax loss -------------------------------------


def poincare_loss(points: np.ndarray, pairs, negatives, ball: BallConfig) -> tuple[float, np.ndarray]:
    """Softmax ranking loss of each positive against its sampled negatives.

    For a pair ``(u, v)`` with candidate set ``{v} ∪ negatives``::

        -log( exp(-d(u, v)) / sum_{w in candidates} exp(-d(u, w)) )

    Returns the summed loss and its gradient with respect to ``points``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(pairs), -1)
    grads = np.zeros_like(points)
    if len(pairs) == 0:
        return 0.0, grads
    if negatives.shape[1] == 0:
        raise InvalidInputError("each pair needs at least one negative")
    u_idx = pairs[:, 0]
    cand = np.concatenate([pairs[:, 1:2], negatives], axis=1)  # (B, 1+k)
    U = np.broadcast_to(points[u_idx][:, None, :], cand.shape + (points.shape[1],))
    W = points[cand].copy()
    same_point = np.all(U == W, axis=-1) & (cand != u_idx[:, None])
    if np.any(same_point):
        W[same_point, 0] += COINCIDENT_NUDGE
    D = geo.hyperbolic_distance(U, W, ball)
    loss = float(np.sum(D[:, 0] + logsumexp(-D, axis=1)))
    soft = np.exp(-D - logsumexp(-D, axis=1, keepdims=True))
    dD = -soft
    dD[:, 0] += 1.0
    gU, gW = geo.distance_gradient_safe(U, W, ball)
    np.add.at(grads, u_idx, np.sum(dD[..., None] * gU, axis=1))
    np.add.at(grads, cand.reshape(-1), (dD[..., None] * gW).reshape(-1, points.shape[1]))
    return loss, grads


# -- phase 2: entailment cones ------------------------------------------


def _scaled(x, ball: BallConfig):
    return np.asarray(x, dtype=np.float64) * np.sqrt(ball.c)


def cone_aperture(v, k: float = 0.1, ball: BallConfig = geo.DEFAULT_BALL):
    """Half-aperture ``arcsin(K (1 - ‖v‖²) / ‖v‖)`` of the cone rooted at ``v``."""
    x = _scaled(v, ball)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r < k):
        raise ConeUndefinedError(f"cone apex inside the inner radius {k}")
    return np.arcsin(np.clip(k * (1 - r * r) / r, -1.0, 1.0))


def cone_angle(u, v, ball: BallConfig = geo.DEFAULT_BALL):
    """Angle at apex ``v`` between the outward radial ray and the geodesic to ``u``."""
    y = _scaled(u, ball)
    x = _scaled(v, ball)
    if np.any(np.all(x == y, axis=-1)):
        raise InvalidInputError("cone angle undefined for coincident points")
    return np.arccos(np.clip(_cos_angle(x, y)[0], -1.0, 1.0))


def cone_energy(u, v, k: float = 0.1, ball: BallConfig = geo.DEFAULT_BALL):
    """``max(0, angle(u, v) - aperture(v))``: zero iff ``u`` lies in the cone of ``v``."""
    return np.maximum(0.0, cone_angle(u, v, ball) - cone_aperture(v, k, ball))


def _cos_angle(x: np.ndarray, y: np.ndarray):
    """Cosine of the cone angle at apex ``x`` towards ``y`` (unit curvature) and its parts."""
    A = np.sum(x * y, axis=-1)
    X = np.sum(x * x, axis=-1)
    Y = np.sum(y * y, axis=-1)
    D = np.maximum(X + Y - 2 * A, 1e-300)
    Q = np.maximum(1 + X * Y - 2 * A, 1e-300)
    N = A * (1 + X) - X * (1 + Y)
    M = np.sqrt(X * D * Q)
    return N / M, (A, X, Y, D, Q, N, M)


def _energy_and_grads(child: np.ndarray, apex: np.ndarray, k: float, ball: BallConfig):
    """Cone energy per row plus gradients w.r.t. the unscaled child and apex."""
    sc = np.sqrt(ball.c)
    y = child * sc
    x = apex * sc
    cos, (A, X, Y, D, Q, N, M) = _cos_angle(x, y)
    cos = np.clip(cos, -1.0, 1.0)
    xi = np.arccos(cos)
    r = np.sqrt(X)
    s = k * (1 - X) / r
    psi = np.arcsin(np.clip(s, -1.0, 1.0))
    energy = np.maximum(0.0, xi - psi)
    active = energy > 0

    gx = np.zeros_like(x)
    gy = np.zeros_like(y)
    if np.any(active):
        c_ = lambda a: a[:, None]  # noqa: E731
        dN_dx = c_(1 + X) * y + c_(2 * A) * x - c_(2 * (1 + Y)) * x
        dN_dy = c_(1 + X) * x - c_(2 * X) * y
        dX_dx = 2 * x
        dD_dx = 2 * (x - y)
        dQ_dx = c_(2 * Y) * x - 2 * y
        dD_dy = 2 * (y - x)
        dQ_dy = c_(2 * X) * y - 2 * x
        dlogM_dx = 0.5 * (dX_dx / c_(X) + dD_dx / c_(D) + dQ_dx / c_(Q))
        dlogM_dy = 0.5 * (dD_dy / c_(D) + dQ_dy / c_(Q))
        dcos_dx = dN_dx / c_(M) - c_(cos) * dlogM_dx
        dcos_dy = dN_dy / c_(M) - c_(cos) * dlogM_dy
        dxi = -1.0 / np.sqrt(np.maximum(1.0 - cos * cos, SIN2_FLOOR))
        ds_dX = k * (-0.5 * X**-1.5 - 0.5 * X**-0.5)
        dpsi_dx = c_(ds_dX / np.sqrt(np.maximum(1.0 - s * s, 1e-30))) * dX_dx
        m = c_(active.astype(np.float64))
        gx = m * (c_(dxi) * dcos_dx - dpsi_dx)
        gy = m * (c_(dxi) * dcos_dy)
    return energy, gy * sc, gx * sc


def entailment_loss(
    points: np.ndarray,
    positives,
    negatives,
    margin: float,
    k: float = 0.1,
    ball: BallConfig = geo.DEFAULT_BALL,
) -> tuple[float, np.ndarray]:
    """Max-margin cone loss over ``(child, apex)`` index pairs.

    ``sum_pos E(u, v) + sum_neg max(0, margin - E(u', v'))``. Apexes must lie
    outside the inner radius.
    """
    grads = np.zeros_like(points)
    loss = 0.0
    for pairs, sign in ((positives, 1.0), (negatives, -1.0)):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) == 0:
            continue
        child, apex = points[pairs[:, 0]], points[pairs[:, 1]]
        if np.any(np.sqrt(ball.c) * np.linalg.norm(apex, axis=1) < k):
            raise ConeUndefinedError(f"cone apex inside the inner radius {k}")
        energy, g_child, g_apex = _energy_and_grads(child, apex, k, ball)
        if sign > 0:
            w = np.ones_like(energy)
            loss += float(np.sum(energy))
        else:
            hinge = margin - energy
            w = -(hinge > 0).astype(np.float64)
            loss += float(np.sum(np.maximum(0.0, hinge)))
        np.add.at(grads, pairs[:, 0], w[:, None] * g_child)
        np.add.at(grads, pairs[:, 1], w[:, None] * g_apex)
    return loss, grads


# -- phase 3: separation ------------------------------------------------


def separation_loss(points: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of off-diagonal cosine similarities, ``1ᵀ(P̄P̄ᵀ - I)1``, and its gradient."""
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidInputError("cannot normalise a zero-norm prototype")
    unit = points / norms
    total = unit.sum(axis=0)
    loss = float(total @ total - len(points))
    # d/dp_i = (I - p̄p̄ᵀ) 2(s - p̄_i) / ‖p_i‖, and the -p̄_i part is radial
    tangential = total - (unit @ total)[:, None] * unit
    return loss, 2.0 * tangential / norms


# -- optimisation -------------------------------------------------------


def _rsgd_step(points, grads, lr, ball: BallConfig):
    points = points - lr * geo.riemannian_rescale(grads, points, ball)
    return geo.project_to_ball(points, ball)


def _push_outside(points: np.ndarray, r_min: float, directions: np.ndarray | None = None) -> np.ndarray:
    """Move points with norm below ``r_min`` onto the sphere of that radius.

    ``directions`` (unit rows) overrides the radial direction of moved points.
    """
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    small = norms[:, 0] < r_min
    if np.any(small):
        fallback = np.zeros(points.shape[1])
        fallback[0] = 1.0
        direction = np.where(norms > 0, points / np.where(norms > 0, norms, 1.0), fallback)
        if directions is not None:
            direction = directions
        points = np.where(small[:, None], direction * r_min, points)
    return points


def _subtree_directions(points: np.ndarray, tree: HierarchyTree) -> np.ndarray:
    """Unit mean direction of each node's strict descendants (own direction for leaves)."""
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    unit = points / np.where(norms > 0, norms, 1.0)
    total = unit.copy()
    for u in range(len(tree)):
        for a in tree.ancestors(u):
            total[a] += unit[u]
    for v in range(len(tree)):
        if tree.children[v]:
            total[v] -= unit[v]
    tn = np.linalg.norm(total, axis=1, keepdims=True)
    fallback = np.zeros(points.shape[1])
    fallback[0] = 1.0
    return np.where(tn > 1e-12, total / np.where(tn > 0, tn, 1.0), fallback)


def _check_finite(loss: float, phase: str, epoch: int):
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite {phase} loss at epoch {epoch}")


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def poincare_phase(points, tree: HierarchyTree, cfg: EmbedConfig, rng: np.random.Generator, history=None):
    ball = cfg.ball
    closure = np.array(tree.transitive_closure(), dtype=np.int64).reshape(-1, 2)
    if len(closure) == 0:
        return points
    pools = [tree.negative_pool(u) for u in range(len(tree))]
    for epoch in range(cfg.poincare_epochs):
        lr = cfg.poincare_lr * (cfg.burn_in_factor if epoch < cfg.burn_in_epochs else 1.0)
        epoch_loss = 0.0
        for batch in _batches(len(closure), cfg.batch_size, rng):
            pairs = closure[batch]
            negs = np.array(
                [rng.choice(pools[u], size=cfg.negatives, replace=cfg.negatives > len(pools[u])) for u in pairs[:, 0]]
            )
            loss, grads = poincare_loss(points, pairs, negs, ball)
            epoch_loss += loss
            points = _rsgd_step(points, grads, lr, ball)
        _check_finite(epoch_loss, "poincare", epoch)
        if history is not None:
            history.setdefault("poincare", []).append(epoch_loss)
    return points


def _sample_cone_negatives(pairs, tree: HierarchyTree, k: int, rng: np.random.Generator, desc_mask):
    """Corrupt either the child or the apex of each positive pair."""
    out = []
    for u, v in pairs:
        # new apex: any node other than u that is not an ancestor of u
        apexes = tree.negative_pool(u)
        apexes = apexes[apexes != u]
        # new child: any node other than v that is not a descendant of v
        children = np.flatnonzero(~desc_mask[v])
        children = children[children != v]
        for _ in range(k):
            corrupt_apex = rng.uniform() < 0.5
            if corrupt_apex and len(apexes) == 0:
                corrupt_apex = False
            elif not corrupt_apex and len(children) == 0:
                corrupt_apex = True
            if corrupt_apex and len(apexes):
                out.append((u, int(rng.choice(apexes))))
            elif not corrupt_apex and len(children):
                out.append((int(rng.choice(children)), v))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def entailment_phase(points, tree: HierarchyTree, cfg: EmbedConfig, rng: np.random.Generator, history=None):
    ball = cfg.ball
    closure = np.array(tree.transitive_closure(), dtype=np.int64).reshape(-1, 2)
    r_min = (cfg.cone_k + APEX_MARGIN) / np.sqrt(ball.c)
    if len(closure) == 0:
        return points
    # negatives may use any node as an apex, so every node is kept outside
    points = _push_outside(points, r_min, _subtree_directions(points, tree))
    desc_mask = np.zeros((len(tree), len(tree)), dtype=bool)
    for u, a in closure:
        desc_mask[a, u] = True
    for epoch in range(cfg.entailment_epochs):
        epoch_loss = 0.0
        for batch in _batches(len(closure), cfg.batch_size, rng):
            pos = closure[batch]
            neg = _sample_cone_negatives(pos, tree, cfg.negatives, rng, desc_mask)
            loss, grads = entailment_loss(points, pos, neg, cfg.margin, cfg.cone_k, ball)
            epoch_loss += loss
            points = _push_outside(_rsgd_step(points, grads, cfg.entailment_lr, ball), r_min)
        _check_finite(epoch_loss, "entailment", epoch)
        if history is not None:
            history.setdefault("entailment", []).append(epoch_loss)
    return points


def separation_phase(points, cfg: EmbedConfig, lr: float | None = None, history=None):
    """Spread prototype directions apart while keeping every norm fixed.

    Steps follow the tangential gradient of ``L_S / n²`` (the squared norm
    of the mean direction) on the unit sphere, then each point is rescaled
    to its original norm.
    """
    lr = cfg.separation_lr if lr is None else lr
    n = len(points)
    if n < 2:
        return points
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InvalidInputError("cannot separate a zero-norm prototype")
    unit = points / norms
    for epoch in range(cfg.separation_epochs):
        total = unit.sum(axis=0)
        loss = float(total @ total - n)
        _check_finite(loss, "separation", epoch)
        if history is not None:
            history.setdefault("separation", []).append(loss)
        tangential = 2.0 * (total - (unit @ total)[:, None] * unit) / n**2
        unit = unit - lr * tangential
        unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    return geo.project_to_ball(unit * norms, cfg.ball)


def run_stage1(tree: HierarchyTree, cfg: EmbedConfig | None = None, history: dict | None = None) -> PrototypeSet:
    """Embed every node of ``tree`` into the Poincaré ball.

    If ``history`` is a dict it receives per-epoch losses and the prototype
    sets after the Poincaré (``"after_poincare"``) and entailment
    (``"after_entailment"``) phases.
    """
    cfg = cfg or EmbedConfig()
    rng = np.random.default_rng(cfg.seed)
    protos = init_prototypes(tree, cfg)
    points = protos.points
    points = poincare_phase(points, tree, cfg, rng, history)
    if history is not None:
        history["after_poincare"] = PrototypeSet(points.copy(), list(tree.node_ids), cfg.ball)
    points = entailment_phase(points, tree, cfg, rng, history)
    if history is not None:
        history["after_entailment"] = PrototypeSet(points.copy(), list(tree.node_ids), cfg.ball)
    points = separation_phase(points, cfg, history=history)
    logger.info("stage 1 done: %d prototypes in %d dimensions", len(points), cfg.dim)
    return PrototypeSet(points, list(tree.node_ids), cfg.ball)


def extract_leaf_prototypes(protos: PrototypeSet, tree: HierarchyTree) -> PrototypeSet:
    """Prototypes of instance nodes only, in tree index order."""
    pos = {nid: i for i, nid in enumerate(protos.node_order)}
    return protos.subset([pos[tree.node_ids[i]] for i in tree.instances])


# -- diagnostics --------------------------------------------------------


def distance_rank_correlation(protos: PrototypeSet, tree: HierarchyTree) -> float:
    """Spearman correlation between hyperbolic and tree distances over all node pairs."""
    pos = {nid: i for i, nid in enumerate(protos.node_order)}
    order = [pos[nid] for nid in tree.node_ids]
    pts = protos.points[order]
    iu, ju = np.triu_indices(len(tree), k=1)
    if len(iu) < 2:
        return float("nan")
    hyp = geo.hyperbolic_distance(pts[iu], pts[ju], protos.ball)
    graph = tree.distance_matrix()[iu, ju]
    return float(spearmanr(hyp, graph).statistic)


def cone_satisfaction(protos: PrototypeSet, tree: HierarchyTree, k: float = 0.1) -> float:
    """Fraction of (descendant, ancestor) pairs whose cone energy is exactly zero."""
    closure = tree.transitive_closure()
    if not closure:
        return 1.0
    pos = {nid: i for i, nid in enumerate(protos.node_order)}
    pairs = np.array([(pos[tree.node_ids[u]], pos[tree.node_ids[a]]) for u, a in closure])
    child, apex = protos.points[pairs[:, 0]], protos.points[pairs[:, 1]]
    apex_r = np.sqrt(protos.ball.c) * np.linalg.norm(apex, axis=1)
    ok = apex_r >= k
    energy = np.full(len(pairs), np.inf)
    if np.any(ok):
        energy[ok], _, _ = _energy_and_grads(child[ok], apex[ok], k, protos.ball)
    return float(np.mean(energy == 0))
