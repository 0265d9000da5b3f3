"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import itertools
import json
import time

import networkx as nx
import numpy as np
import pytest

from hyperclic import cli
from hyperclic.embedding import EmbedConfig, cone_satisfaction, distance_rank_correlation, run_stage1
from hyperclic.experiment import ExperimentConfig, run_experiment
from hyperclic.geometry import (
    BallConfig,
    distance_gradient,
    exp_map_zero,
    exp_map_zero_vjp,
    hyperbolic_distance,
    log_map_zero,
    mobius_add,
)
from hyperclic.hierarchy import HierarchyTree, balanced_tree
from hyperclic.learner import FeatureExtractor, LearnerConfig, ModelState, combined_step, herding_select
from hyperclic.metrics import PredictionRecord, average_mean, lca_severity

from .conftest import random_ball_points, random_tree

N_PAIRS = 10_000


def report(n, ok, detail=""):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
    print("\n" + line + (f"  ({detail})" if detail else ""))
    return ok


def rowwise_rel_error(analytic, numeric):
    """Per-row max componentwise error over the row's largest component."""
    scale = np.maximum(np.maximum(np.abs(analytic).max(-1), np.abs(numeric).max(-1)), 1e-12)
    return np.abs(analytic - numeric).max(-1) / scale


def batched_fd(f, x, h):
    """Central differences of a row-wise scalar ``f`` for every row of ``x`` at once."""
    g = np.zeros_like(x)
    for k in range(x.shape[1]):
        xp, xm = x.copy(), x.copy()
        xp[:, k] += h
        xm[:, k] -= h
        g[:, k] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_criterion_1_geometry():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    checks = {}
    for c in (1.0, 0.7):
        cfg = BallConfig(c=c, dim=5)
        r = 0.9 / np.sqrt(c)
        p, q, s = (random_ball_points(rng, N_PAIRS, 5, r) for _ in range(3))
        zero = np.zeros_like(p)
        checks[f"mobius identities c={c}"] = max(
            np.abs(mobius_add(zero, p, cfg) - p).max(),
            np.abs(mobius_add(p, zero, cfg) - p).max(),
            np.abs(mobius_add(-p, p, cfg)).max(),
            np.abs(mobius_add(-p, mobius_add(p, q, cfg), cfg) - q).max(),
        ) <= 1e-8
        dpq, dqp = hyperbolic_distance(p, q, cfg), hyperbolic_distance(q, p, cfg)
        checks[f"symmetry c={c}"] = np.abs(dpq - dqp).max() <= 1e-8
        checks[f"triangle c={c}"] = bool(
            np.all(hyperbolic_distance(p, s, cfg) <= dpq + hyperbolic_distance(q, s, cfg) + 1e-8)
        )
        v = log_map_zero(p, cfg)
        checks[f"exp/log round trip c={c}"] = max(
            np.abs(exp_map_zero(v, cfg) - p).max(), np.abs(log_map_zero(exp_map_zero(v, cfg), cfg) - v).max()
        ) <= 1e-8

        g1, g2 = distance_gradient(p, q, cfg)
        n1 = batched_fd(lambda a: hyperbolic_distance(a, q, cfg), p, 1e-6)
        n2 = batched_fd(lambda b: hyperbolic_distance(p, b, cfg), q, 1e-6)
        checks[f"distance gradient c={c}"] = max(rowwise_rel_error(g1, n1).max(), rowwise_rel_error(g2, n2).max()) < 1e-4

        x = rng.normal(size=(N_PAIRS, 5)) * rng.choice([0.01, 0.3, 1.0, 3.0], size=(N_PAIRS, 1))
        w = rng.normal(size=(N_PAIRS, 5))
        numeric = batched_fd(lambda t: np.sum(w * exp_map_zero(t, cfg), axis=-1), x, 1e-6)
        checks[f"exp map gradient c={c}"] = rowwise_rel_error(exp_map_zero_vjp(x, w, cfg), numeric).max() < 1e-4
    elapsed = time.perf_counter() - start
    checks["runtime < 10 s"] = elapsed < 10
    failed = [k for k, ok in checks.items() if not ok]
    assert report(1, not failed, f"{elapsed:.1f}s" + (f", failed: {failed}" if failed else ""))


def nx_oracle(parents):
    g = nx.DiGraph()
    g.add_nodes_from(range(len(parents)))
    g.add_edges_from((p, i) for i, p in enumerate(parents) if p >= 0)
    pairs = list(itertools.combinations(range(len(parents)), 2))
    lca = dict(nx.all_pairs_lowest_common_ancestor(g, pairs=pairs)) if pairs else {}
    dist = dict(nx.all_pairs_shortest_path_length(g.to_undirected()))
    closure = {(u, a) for u in g for a in nx.ancestors(g, u)}
    return lca, dist, closure


def test_criterion_2_hierarchy_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        parents = random_tree(rng, int(rng.integers(1, 51)))
        tree = HierarchyTree.from_records(
            (f"n{i}", "other", None if p < 0 else f"n{p}") for i, p in enumerate(parents)
        )
        lca, dist, closure = nx_oracle(parents)
        mismatches += set(tree.transitive_closure()) != closure
        n = len(parents)
        for u, v in itertools.combinations(range(n), 2):
            mismatches += tree.lca_index(u, v) != lca[(u, v)]
        for u in range(n):
            for v in range(n):
                mismatches += tree.tree_distance(u, v) != dist[u][v]
    elapsed = time.perf_counter() - start
    assert report(2, mismatches == 0 and elapsed < 5, f"{mismatches} mismatches, {elapsed:.1f}s")


def test_criterion_3_stage1_quality():
    start = time.perf_counter()
    tree = balanced_tree(3, 3, 3)
    assert len(tree) == 40
    attempts = []
    for seed in range(4):  # original seed plus up to 3 re-seeds
        history = {}
        cfg = EmbedConfig(dim=10, seed=seed)
        protos = run_stage1(tree, cfg, history)
        rho = distance_rank_correlation(protos, tree)
        cones = cone_satisfaction(history["after_entailment"], tree, cfg.cone_k)
        attempts.append((seed, round(rho, 3), round(cones, 3)))
        if rho >= 0.9 and cones >= 0.95:
            break
    elapsed = time.perf_counter() - start
    ok = rho >= 0.9 and cones >= 0.95 and elapsed < 120
    assert report(3, ok, f"(seed, spearman, cone fraction) = {attempts}, {elapsed:.1f}s")


def test_criterion_4_combined_gradient():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    ball = BallConfig(dim=3)
    errors = []
    for kind, lam in itertools.product(("cross_entropy", "kl_divergence", "mse"), (0.1, 0.5, 0.9)):
        model = FeatureExtractor.init([4, 6, 5, 3], rng)
        snap = FeatureExtractor.init([4, 6, 5, 3], rng)
        protos = random_ball_points(rng, 3, 3, 0.9)
        x = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, size=8)
        is_ex = np.arange(8) % 2 == 0
        cfg = LearnerConfig(lam=lam, distillation=kind)
        active, old = np.arange(3), np.array([0, 1])

        def loss(m):
            return combined_step(x, y, is_ex, ModelState(m, snap, [0, 1, 2], 2), protos, active, old, cfg, ball)[0]

        _, grads = combined_step(x, y, is_ex, ModelState(model, snap, [0, 1, 2], 2), protos, active, old, cfg, ball)
        analytic = np.concatenate([g.ravel() for g in grads])
        numeric = []
        for p in model.params():
            flat = p.reshape(-1)
            for i in range(flat.size):
                old_v = flat[i]
                flat[i] = old_v + 1e-6
                fp = loss(model)
                flat[i] = old_v - 1e-6
                fm = loss(model)
                flat[i] = old_v
                numeric.append((fp - fm) / 2e-6)
        numeric = np.array(numeric)
        errors.append(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), np.abs(analytic).max()))
    elapsed = time.perf_counter() - start
    worst = max(errors)
    assert report(4, worst < 1e-4 and elapsed < 30, f"worst relative error {worst:.2e}, {elapsed:.1f}s")


@pytest.fixture(scope="module")
def stream_runs(tmp_path_factory):
    """Default synthetic stream under each method and lambda, seed fixed by the defaults."""
    root = tmp_path_factory.mktemp("stream")
    start = time.perf_counter()
    runs = {}
    variants = {
        "hyperclic": {"method": "hyperclic"},
        "naive": {"method": "naive"},
        "lam0.1": {"learner": {"lam": 0.1}},
        "lam0.9": {"learner": {"lam": 0.9}},
    }
    for name, overrides in variants.items():
        sink = []
        cfg = ExperimentConfig.from_dict(overrides | {"output_dir": str(root / name)})
        runs[name] = (run_experiment(cfg, sink), sink)
    runs["lam0.5"] = runs["hyperclic"]
    runs["elapsed"] = time.perf_counter() - start
    return runs


def test_criterion_5_continual_trends(stream_runs):
    summary = {k: v[0]["summary"] for k, v in stream_runs.items() if k != "elapsed"}
    acc = {k: s["average_instance_accuracy"] for k, s in summary.items()}
    forget = {k: s["forgetting"] for k, s in summary.items()}
    parts = {
        "accuracy hyperclic > naive": acc["hyperclic"] > acc["naive"],
        "forgetting hyperclic < naive": forget["hyperclic"] < forget["naive"],
        "lambda 0.5 >= 0.1": acc["lam0.5"] >= acc["lam0.1"],
        "lambda 0.5 >= 0.9": acc["lam0.5"] >= acc["lam0.9"],
        "runtime < 5 min": stream_runs["elapsed"] < 300,
    }
    detail = (
        f"acc hyperclic {acc['hyperclic']:.4f} naive {acc['naive']:.4f}; "
        f"forgetting hyperclic {forget['hyperclic']:.4f} naive {forget['naive']:.4f}; "
        f"lambda 0.1/0.5/0.9 acc {acc['lam0.1']:.4f}/{acc['lam0.5']:.4f}/{acc['lam0.9']:.4f}; "
        f"failed: {[k for k, ok in parts.items() if not ok]}"
    )
    assert report(5, all(parts.values()), detail)


def test_criterion_6_hierarchical_mistakes(stream_runs):
    tree = balanced_tree(3, 2, 2)
    lca = {k: stream_runs[k][0]["summary"]["average_lca"] for k in ("hyperclic", "naive")}
    chain_ok = True
    n_records = 0
    for name in ("hyperclic", "naive"):
        for r in stream_runs[name][1]:
            inst = r.true_id == r.pred_id
            cls = tree.parent_of(r.true_id) == tree.parent_of(r.pred_id)
            sup = tree.grandparent_of(r.true_id) == tree.grandparent_of(r.pred_id)
            chain_ok &= int(inst) <= int(cls) <= int(sup)
            n_records += 1
        g = {k: np.array(v) for k, v in stream_runs[name][0]["grids"].items()}
        chain_ok &= bool(np.all(g["instance"] <= g["class"]) and np.all(g["class"] <= g["superclass"]))
    ok = lca["hyperclic"] <= lca["naive"] and chain_ok and n_records > 0
    assert report(
        6, ok, f"lca hyperclic {lca['hyperclic']:.4f} naive {lca['naive']:.4f}; chain holds on {n_records} records: {chain_ok}"
    )


def test_criterion_7_metric_formulas(small_tree):
    hand = [
        ([[1.0, 1.0], [0.0, 1.0]], (1.0 + 1.0 + 0.0 + 1.0) / 4),
        ([[0.5, 0.25], [0.125, 0.75]], (0.5 + 0.25 + 0.125 + 0.75) / 4),
        ([[0.0, 0.0], [0.0, 0.0]], 0.0),
    ]
    means_ok = all(average_mean(m, "all") == expected for m, expected in hand)
    class_level = lca_severity([PredictionRecord("i1", "i2")], small_tree)[0]
    superclass_level = lca_severity([PredictionRecord("i1", "i3")], small_tree)[0]
    ok = means_ok and class_level == 1 and superclass_level == 2
    assert report(7, ok, f"average_mean exact: {means_ok}; lca {class_level:g} and {superclass_level:g}")


def greedy_oracle(features, m):
    """Pick, at each step, the unused row whose addition puts the prefix mean closest to the full mean."""
    mu = features.mean(axis=0)
    chosen = []
    for k in range(1, min(m, len(features)) + 1):
        costs = {
            i: np.linalg.norm(mu - (features[chosen].sum(axis=0) + features[i]) / k)
            for i in range(len(features))
            if i not in chosen
        }
        chosen.append(min(costs, key=lambda i: (costs[i], i)))
    return chosen


def test_criterion_8_herding():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(50):
        n, m = int(rng.integers(1, 13)), int(rng.integers(1, 6))
        feats = rng.normal(size=(n, int(rng.integers(1, 6))))
        mismatches += list(herding_select(feats, m)) != greedy_oracle(feats, m)
    assert report(8, mismatches == 0, f"{mismatches} of 50 sets differ")


def test_criterion_9_determinism(tmp_path, monkeypatch):
    config = tmp_path / "exp.json"
    config.write_text(json.dumps({"output_dir": "unused"}))
    texts = []
    for name in ("a", "b"):
        monkeypatch.setenv("HYPERCLIC_OUTPUT_DIR", str(tmp_path / name))
        assert cli.main(["run", "--config", str(config)]) == 0
        texts.append((tmp_path / name / "report.json").read_text())
    assert report(9, texts[0] == texts[1], f"{len(texts[0])} bytes compared")
