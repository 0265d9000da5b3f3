"""Class-instance taxonomy: loading, validation and tree queries."""

from __future__ import annotations

import collections
import os
from collections.abc import Iterable, Sequence

import numpy as np

from .errors import HierarchyError

KINDS = ("instance", "class", "superclass", "other")
ROOT_MARKER = "-"


class HierarchyTree:
    """An immutable rooted tree whose nodes are typed labels.

    Nodes are identified by opaque string ids. Each node also gets a dense
    integer index in the order it was supplied, which is what array-backed
    components (prototypes, labels) use.
    """

    def __init__(self, node_ids: Sequence[str], kinds: Sequence[str], parents: Sequence[int]):
        self.node_ids = tuple(node_ids)
        self.kinds = tuple(kinds)
        self.parent = np.asarray(parents, dtype=np.int64)
        self.index = {nid: i for i, nid in enumerate(self.node_ids)}
        self._validate()
        self.children: list[list[int]] = [[] for _ in self.node_ids]
        for i, p in enumerate(self.parent):
            if p >= 0:
                self.children[p].append(i)
        self.depth = self._compute_depths()
        self._ancestors = [self._walk_up(i) for i in range(len(self))]

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, str | None]]) -> "HierarchyTree":
        """Build from ``(node_id, kind, parent_id)`` triples; root has parent ``None``."""
        records = list(records)
        ids = [r[0] for r in records]
        seen = set()
        for nid in ids:
            if nid in seen:
                raise HierarchyError(f"duplicate node id {nid!r}")
            seen.add(nid)
        index = {nid: i for i, nid in enumerate(ids)}
        parents = []
        for nid, _, par in records:
            if par is None or par == ROOT_MARKER:
                parents.append(-1)
            elif par not in index:
                raise HierarchyError(f"node {nid!r} references unknown parent {par!r}")
            else:
                parents.append(index[par])
        return cls(ids, [r[1] for r in records], parents)

    def __len__(self) -> int:
        return len(self.node_ids)

    def __repr__(self) -> str:
        return f"HierarchyTree(nodes={len(self)}, instances={len(self.instances)}, height={self.height})"

    def _validate(self):
        n = len(self.node_ids)
        if n == 0:
            raise HierarchyError("empty hierarchy")
        if len(self.index) != n:
            raise HierarchyError("duplicate node ids")
        for nid, kind in zip(self.node_ids, self.kinds):
            if kind not in KINDS:
                raise HierarchyError(f"node {nid!r} has unknown kind {kind!r}")
        roots = [i for i in range(n) if self.parent[i] < 0]
        if len(roots) != 1:
            raise HierarchyError(
                f"expected exactly one root, found {len(roots)}: "
                + ", ".join(self.node_ids[i] for i in roots[:5])
            )
        self.root = roots[0]
        # every node must reach the root without revisiting a node
        state = np.zeros(n, dtype=np.int8)  # 0 unvisited, 1 on stack, 2 ok
        state[self.root] = 2
        for start in range(n):
            path = []
            v = start
            while state[v] == 0:
                state[v] = 1
                path.append(v)
                v = int(self.parent[v])
            if state[v] == 1:
                raise HierarchyError(f"cycle detected through node {self.node_ids[v]!r}")
            for u in path:
                state[u] = 2
        for i in range(n):
            p = self.parent[i]
            if p < 0:
                continue
            if self.kinds[p] == "instance":
                raise HierarchyError(f"instance {self.node_ids[p]!r} has children")
            if self.kinds[i] == "instance" and self.kinds[p] != "class":
                raise HierarchyError(
                    f"instance {self.node_ids[i]!r} has parent of kind {self.kinds[p]!r}, expected class"
                )
            if self.kinds[i] == "class" and self.kinds[p] != "superclass":
                raise HierarchyError(
                    f"class {self.node_ids[i]!r} has parent of kind {self.kinds[p]!r}, expected superclass"
                )

    def _compute_depths(self) -> np.ndarray:
        depth = np.full(len(self), -1, dtype=np.int64)
        depth[self.root] = 0
        for v in self.bfs_order():
            if v != self.root:
                depth[v] = depth[self.parent[v]] + 1
        return depth

    def _walk_up(self, i: int) -> tuple[int, ...]:
        out = []
        p = self.parent[i]
        while p >= 0:
            out.append(int(p))
            p = self.parent[p]
        return tuple(out)

    def bfs_order(self) -> list[int]:
        order = [self.root]
        queue = collections.deque([self.root])
        while queue:
            v = queue.popleft()
            for ch in self.children[v]:
                order.append(ch)
                queue.append(ch)
        return order

    # -- queries ---------------------------------------------------------

    def idx(self, node) -> int:
        """Index of ``node`` given either its id or its index."""
        if isinstance(node, (int, np.integer)):
            if not 0 <= node < len(self):
                raise HierarchyError(f"node index {node} out of range")
            return int(node)
        try:
            return self.index[node]
        except KeyError:
            raise HierarchyError(f"unknown node id {node!r}") from None

    @property
    def instances(self) -> list[int]:
        """Indices of instance nodes in index order."""
        return [i for i, k in enumerate(self.kinds) if k == "instance"]

    @property
    def height(self) -> int:
        return int(self.depth.max())

    def ancestors(self, node) -> tuple[int, ...]:
        """Strict ancestors, nearest first."""
        return self._ancestors[self.idx(node)]

    def parent_of(self, node) -> str:
        i = self.idx(node)
        p = self.parent[i]
        if p < 0:
            raise HierarchyError(f"root {self.node_ids[i]!r} has no parent")
        return self.node_ids[p]

    def grandparent_of(self, node) -> str:
        anc = self.ancestors(node)
        if len(anc) < 2:
            raise HierarchyError(f"node {self.node_ids[self.idx(node)]!r} has no grandparent")
        return self.node_ids[anc[1]]

    def lca(self, u, v) -> str:
        return self.node_ids[self.lca_index(u, v)]

    def lca_index(self, u, v) -> int:
        a, b = self.idx(u), self.idx(v)
        while self.depth[a] > self.depth[b]:
            a = int(self.parent[a])
        while self.depth[b] > self.depth[a]:
            b = int(self.parent[b])
        while a != b:
            a = int(self.parent[a])
            b = int(self.parent[b])
        return a

    def tree_distance(self, u, v) -> int:
        a, b = self.idx(u), self.idx(v)
        m = self.lca_index(a, b)
        return int(self.depth[a] + self.depth[b] - 2 * self.depth[m])

    def distance_matrix(self) -> np.ndarray:
        n = len(self)
        out = np.zeros((n, n), dtype=np.int64)
        for a in range(n):
            for b in range(a + 1, n):
                out[a, b] = out[b, a] = self.tree_distance(a, b)
        return out

    def transitive_closure(self) -> list[tuple[int, int]]:
        """All (descendant, strict ancestor) index pairs."""
        return [(u, a) for u in range(len(self)) for a in self._ancestors[u]]

    def negative_pool(self, node) -> np.ndarray:
        """Nodes that are not strict ancestors of ``node`` (``node`` itself included)."""
        u = self.idx(node)
        mask = np.ones(len(self), dtype=bool)
        mask[list(self._ancestors[u])] = False
        return np.flatnonzero(mask)

    def sample_negatives(self, node, k: int, rng: np.random.Generator) -> list[int]:
        """Draw ``k`` nodes uniformly from the negative pool of ``node``.

        Without replacement when the pool is large enough, with replacement otherwise.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        pool = self.negative_pool(node)
        return [int(v) for v in rng.choice(pool, size=k, replace=k > len(pool))]

    # -- io --------------------------------------------------------------

    def records(self) -> list[tuple[str, str, str]]:
        """Canonical breadth-first ``(node_id, kind, parent_id)`` records."""
        out = []
        for i in self.bfs_order():
            p = self.parent[i]
            out.append((self.node_ids[i], self.kinds[i], ROOT_MARKER if p < 0 else self.node_ids[p]))
        return out

    def canonical(self) -> "HierarchyTree":
        return HierarchyTree.from_records(self.records())


def load_hierarchy(path: str | os.PathLike) -> HierarchyTree:
    """Read a tab-separated hierarchy file (``node_id  kind  parent_id``)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise HierarchyError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            records.append((parts[0], parts[1], parts[2]))
    return HierarchyTree.from_records(records)


def save_hierarchy(tree: HierarchyTree, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# node_id\tkind\tparent_id\n")
        for rec in tree.records():
            fh.write("\t".join(rec) + "\n")


def balanced_tree(n_superclasses: int, classes_per_superclass: int, instances_per_class: int) -> HierarchyTree:
    """Root -> superclasses -> classes -> instances, with uniform branching."""
    records = [("root", "other", None)]
    for s in range(n_superclasses):
        sid = f"s{s}"
        records.append((sid, "superclass", "root"))
        for c in range(classes_per_superclass):
            cid = f"{sid}c{c}"
            records.append((cid, "class", sid))
            for i in range(instances_per_class):
                records.append((f"{cid}i{i}", "instance", cid))
    return HierarchyTree.from_records(records)
