"""Prototype selection and the max-bottleneck Optimum-Path Forest over phi
weights.

Each prototype starts with cost 1 and every other feature with cost 0; a
feature's cost is the best, over all prototypes and paths, of the smallest
phi along the path. Features without a positive path stay unassigned.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass
from typing import TextIO

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .correlation import PhiGraph

log = logging.getLogger(__name__)

NONE = -1


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: tuple[int, ...]
    group_of: dict[int, int]

    @property
    def groups(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for f, gid in sorted(self.group_of.items()):
            out.setdefault(gid, []).append(f)
        return [out[k] for k in sorted(out)]


def dense_groups(g: PhiGraph, dense_threshold: float = 0.9) -> list[list[int]]:
    """Connected components (size >= 2) of the subgraph with phi > threshold,
    ordered by smallest member."""
    strong = g.adj.multiply(g.adj > dense_threshold).tocsr()
    strong.eliminate_zeros()
    _, labels = connected_components(strong, directed=False)
    comps: dict[int, list[int]] = {}
    for f, lab in enumerate(labels):
        comps.setdefault(int(lab), []).append(f)
    groups = [m for m in comps.values() if len(m) >= 2]
    groups.sort(key=lambda m: m[0])
    return groups


def select_prototypes(g: PhiGraph, dense_threshold: float = 0.9, seed: int = 0) -> PrototypeSet:
    """One uniformly drawn prototype per dense group, replayable under ``seed``."""
    if not 0.0 < dense_threshold < 1.0:
        raise ValueError("dense_threshold must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    protos = []
    group_of = {}
    for gid, members in enumerate(dense_groups(g, dense_threshold)):
        protos.append(int(members[rng.integers(len(members))]))
        for f in members:
            group_of[f] = gid
    return PrototypeSet(tuple(sorted(protos)), group_of)


@dataclass(frozen=True, eq=False)
class OpfForest:
    cost: np.ndarray  # float64, 0 for unassigned
    pred: np.ndarray  # int64, -1 for none
    root: np.ndarray  # int64, -1 for none
    prototypes: tuple[int, ...]

    @property
    def n_features(self) -> int:
        return len(self.cost)

    def assigned(self) -> np.ndarray:
        return np.flatnonzero(self.root != NONE)


def build_forest(g: PhiGraph, protos: PrototypeSet | tuple[int, ...] | list[int], min_cost: float = 0.0) -> OpfForest:
    """Best-first conquest from all prototypes at once.

    The heap orders by (cost desc, feature asc, push order). A frontier
    offer only replaces the current one when strictly better, so on equal
    cost the feature stays with the tree that reached it first.
    ``min_cost`` drops assignments whose bottleneck falls below it; since
    cost never increases down a tree this removes whole subtrees.
    """
    p_list = sorted(protos.prototypes if isinstance(protos, PrototypeSet) else protos)
    d = g.n_features
    cost = np.zeros(d, dtype=np.float64)
    pred = np.full(d, NONE, dtype=np.int64)
    root = np.full(d, NONE, dtype=np.int64)
    done = np.zeros(d, dtype=bool)
    if not p_list:
        log.warning("no prototypes: every feature is left unassigned")
        return OpfForest(cost, pred, root, ())

    tick = itertools.count()
    heap: list[tuple[float, int, int]] = []
    for p in p_list:
        cost[p] = 1.0
        root[p] = p
        heapq.heappush(heap, (-1.0, p, next(tick)))

    indptr, indices, data = g.adj.indptr, g.adj.indices, g.adj.data
    while heap:
        neg, f, _ = heapq.heappop(heap)
        if done[f] or -neg != cost[f]:
            continue
        done[f] = True
        cf = cost[f]
        for k in range(indptr[f], indptr[f + 1]):
            h = indices[k]
            if done[h]:
                continue
            cand = min(cf, data[k])
            if cand > cost[h]:
                cost[h] = cand
                pred[h] = f
                root[h] = root[f]
                heapq.heappush(heap, (-cand, int(h), next(tick)))

    if min_cost > 0:
        drop = (cost < min_cost) & (root != NONE)
        cost[drop] = 0.0
        pred[drop] = NONE
        root[drop] = NONE
    return OpfForest(cost, pred, root, tuple(p_list))


def clusters(forest: OpfForest) -> list[list[int]]:
    """Assigned features grouped by tree, in ascending prototype order."""
    out = []
    for p in forest.prototypes:
        members = np.flatnonzero(forest.root == p)
        if len(members):
            out.append(members.tolist())
    return out


def dump_forest(forest: OpfForest, fh: TextIO) -> None:
    for f in range(forest.n_features):
        r = "-" if forest.root[f] == NONE else str(int(forest.root[f]))
        p = "-" if forest.pred[f] == NONE else str(int(forest.pred[f]))
        fh.write(f"{f} {r} {p} {forest.cost[f]:.9g}\n")
