import numpy as np
import pytest

from hyperclic.hierarchy import HierarchyTree


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def grad_rel_error(analytic, numeric):
    """Max componentwise error scaled by the gradient's largest component."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def random_ball_points(rng, n, d, max_norm=0.9):
    direction = rng.normal(size=(n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = max_norm * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return direction * radius


def random_tree(rng, n_nodes):
    """Random rooted tree as a parent list (node 0 is the root)."""
    return [-1] + [int(rng.integers(0, i)) for i in range(1, n_nodes)]


@pytest.fixture
def small_tree():
    # root -> s1, s2 ; s1 -> c1, c2 ; s2 -> c3 ; c1 -> i1, i2 ; c2 -> i3 ; c3 -> i4
    return HierarchyTree.from_records(
        [
            ("root", "other", None),
            ("s1", "superclass", "root"),
            ("s2", "superclass", "root"),
            ("c1", "class", "s1"),
            ("c2", "class", "s1"),
            ("c3", "class", "s2"),
            ("i1", "instance", "c1"),
            ("i2", "instance", "c1"),
            ("i3", "instance", "c2"),
            ("i4", "instance", "c3"),
        ]
    )
