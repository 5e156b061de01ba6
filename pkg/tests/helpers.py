"""Fixture builders shared by several test modules."""

import numpy as np

from cfguard.constraints import Perturbation, assemble
from cfguard.correlation import PhiGraph
from cfguard.opf import NONE, build_forest


def make_cs(d, pairs=(), clusters=(), phi=None):
    """Hand-built constraint set. Each cluster is rooted at its first member;
    ``phi`` maps (i, j) to a within-cluster edge weight."""
    phi = phi or {}
    edges = [(i, j, w) for (i, j), w in phi.items()]
    protos = [c[0] for c in clusters]
    # a weak chain keeps every member in its cluster
    for c in clusters:
        for a, b in zip(c, c[1:]):
            if (a, b) not in phi and (b, a) not in phi:
                edges.append((a, b, 0.05))
    g = PhiGraph.from_edges(d, edges, perfect_pairs=pairs)
    return assemble(g, build_forest(g, protos))


def random_graph(rng, max_nodes=12, max_protos=3, p_hi=0.6):
    n = int(rng.integers(1, max_nodes + 1))
    p = rng.uniform(0.1, p_hi)
    # a coarse weight grid makes ties common
    grid = np.array([0.2, 0.4, 0.5, 0.7, 0.9, 1.0])
    edges = {}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges[(i, j)] = float(rng.choice(grid)) if rng.random() < 0.4 else round(float(rng.uniform(0.01, 1)), 3)
    k = int(rng.integers(0, min(n, max_protos) + 1))
    protos = sorted(int(v) for v in rng.choice(n, size=k, replace=False))
    return n, edges, protos


def check_forest(g: PhiGraph, forest, protos):
    """Bellman consistency plus structural sanity; returns nothing, asserts."""
    for f in range(g.n_features):
        if f in protos:
            assert forest.cost[f] == 1.0 and forest.root[f] == f and forest.pred[f] == NONE
            continue
        if forest.root[f] == NONE:
            assert forest.cost[f] == 0.0 and forest.pred[f] == NONE
            continue
        p = forest.pred[f]
        assert forest.cost[f] == min(forest.cost[p], g.weight(p, f))
        assert forest.root[f] == forest.root[p]
        assert forest.cost[p] >= forest.cost[f]
        nbr, w = g.neighbors(f)
        for h, wh in zip(nbr, w):
            if forest.root[h] != NONE:
                assert forest.cost[f] >= min(forest.cost[h], wh)


def random_cs_perturbation(rng, max_d=14):
    """Random constraint set with clusters, perfect pairs and a perturbation."""
    d = int(rng.integers(2, max_d + 1))
    perm = rng.permutation(d).tolist()
    cuts = sorted(rng.choice(np.arange(1, d), size=int(rng.integers(0, d - 1)), replace=False).tolist())
    parts = [perm[a:b] for a, b in zip([0] + cuts, cuts + [d])]
    clusters = [sorted(p) for p in parts if len(p) >= 2 and rng.random() < 0.7]
    phi = {}
    for c in clusters:
        for a in c:
            for b in c:
                if a < b and rng.random() < 0.6:
                    phi[(a, b)] = round(float(rng.uniform(0.05, 1.0)), 2)
    pairs = [(a, b) for (a, b), w in phi.items() if w == 1.0]
    pairs += [tuple(sorted(rng.choice(d, 2, replace=False).tolist())) for _ in range(int(rng.integers(0, 3)))]
    cs = make_cs(d, pairs=pairs, clusters=clusters, phi=phi)
    return cs, random_perturbation(rng, d)


def random_perturbation(rng, d):
    mask = rng.random(d)
    base = {f for f in range(d) if mask[f] < 0.3}
    added = tuple(f for f in range(d) if f not in base and mask[f] > 0.6)
    return Perturbation(base, added)
