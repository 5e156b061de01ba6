"""The learned constraint set: perfect (bidirectional) pairs plus
cluster-membership (unidirectional) rules, with validation, the constraint
satisfaction rate and closure-based repair of perturbations."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .correlation import PhiGraph, bidirectional_set
from .errors import ArtifactError, DataError
from .opf import NONE, OpfForest, clusters as forest_clusters

SCHEMA_VERSION = 1
REPAIR_MODES = ("phi", "prototype")


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    n_features: int
    bidirectional: tuple[tuple[int, int], ...]
    clusters: tuple[tuple[int, ...], ...]
    prototypes: tuple[int, ...]
    cost: np.ndarray
    # per feature: cluster-mates with a direct positive edge, best first
    phi_within: tuple[tuple[tuple[int, float], ...], ...]
    constant_features: tuple[int, ...] = ()
    cluster_of: np.ndarray = field(init=False, repr=False)
    partners: dict[int, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        d = self.n_features
        for i, j in self.bidirectional:
            if not (0 <= i < d and 0 <= j < d) or i == j:
                raise DataError(f"bad bidirectional pair ({i}, {j}) for d={d}")
        cluster_of = np.full(d, NONE, dtype=np.int64)
        for ci, members in enumerate(self.clusters):
            for f in members:
                if cluster_of[f] != NONE:
                    raise DataError(f"feature {f} appears in two clusters")
                cluster_of[f] = ci
        if len(self.prototypes) != len(self.clusters):
            raise DataError("one prototype per cluster is required")
        if len(self.cost) != d or len(self.phi_within) != d:
            raise DataError("cost / phi_within must have one entry per feature")
        partners: dict[int, list[int]] = {}
        for i, j in self.bidirectional:
            partners.setdefault(i, []).append(j)
            partners.setdefault(j, []).append(i)
        object.__setattr__(self, "cluster_of", cluster_of)
        object.__setattr__(self, "partners", {k: tuple(sorted(v)) for k, v in partners.items()})

    @classmethod
    def empty(cls, n_features: int, constant_features: Sequence[int] = ()) -> "ConstraintSet":
        return cls(n_features, (), (), (), np.zeros(n_features), tuple(() for _ in range(n_features)),
                   tuple(constant_features))

    def mates(self, f: int) -> tuple[int, ...]:
        ci = self.cluster_of[f]
        if ci == NONE:
            return ()
        return tuple(g for g in self.clusters[ci] if g != f)

    # -------------------------------------------------------------- JSON

    def to_dict(self) -> dict:
        edges = sorted(
            (min(f, g), max(f, g), w) for f in range(self.n_features) for g, w in self.phi_within[f] if f < g
        )
        return {
            "version": SCHEMA_VERSION,
            "n_features": self.n_features,
            "bidirectional": [list(p) for p in sorted(self.bidirectional)],
            "clusters": [
                {"prototype": p, "members": list(m)}
                for p, m in sorted(zip(self.prototypes, self.clusters))
            ],
            "cost": [float(c) for c in self.cost],
            "cluster_edges": [[i, j, w] for i, j, w in edges],
            "constant_features": list(self.constant_features),
        }

    @classmethod
    def from_dict(cls, doc: dict, source="<constraints>") -> "ConstraintSet":
        if doc.get("version") != SCHEMA_VERSION:
            raise ArtifactError(source, f"unsupported constraint schema version {doc.get('version')!r}",
                                SCHEMA_VERSION)
        try:
            d = int(doc["n_features"])
            pairs = tuple(sorted((int(i), int(j)) for i, j in doc["bidirectional"]))
            cl = sorted(doc["clusters"], key=lambda c: c["prototype"])
            protos = tuple(int(c["prototype"]) for c in cl)
            members = tuple(tuple(sorted(int(f) for f in c["members"])) for c in cl)
            cost = np.asarray(doc["cost"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(source, f"malformed constraint set: {exc}", SCHEMA_VERSION) from None
        within: list[list[tuple[int, float]]] = [[] for _ in range(d)]
        if "cluster_edges" in doc:
            for i, j, w in doc["cluster_edges"]:
                within[int(i)].append((int(j), float(w)))
                within[int(j)].append((int(i), float(w)))
        else:
            # no phi available: rank mates by their own path cost
            for m in members:
                for f in m:
                    within[f] = [(g, float(cost[g])) for g in m if g != f]
        phi_within = tuple(tuple(sorted(lst, key=lambda t: (-t[1], t[0]))) for lst in within)
        return cls(d, pairs, members, protos, cost, phi_within, tuple(doc.get("constant_features", ())))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ConstraintSet":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ArtifactError(path, "no such file", SCHEMA_VERSION) from None
        except json.JSONDecodeError as exc:
            raise ArtifactError(path, f"invalid JSON: {exc}", SCHEMA_VERSION) from None
        return cls.from_dict(doc, path)


def assemble(g: PhiGraph, forest: OpfForest) -> ConstraintSet:
    """Combine perfect pairs of ``g`` with the trees of ``forest``."""
    if g.n_features != forest.n_features:
        raise DataError(f"dimension mismatch: graph has {g.n_features} features, forest {forest.n_features}")
    cl = forest_clusters(forest)
    protos = tuple(int(forest.root[m[0]]) for m in cl)
    cluster_of = np.full(g.n_features, NONE, dtype=np.int64)
    for ci, m in enumerate(cl):
        cluster_of[m] = ci
    within = []
    for f in range(g.n_features):
        ci = cluster_of[f]
        if ci == NONE:
            within.append(())
            continue
        nbr, w = g.neighbors(f)
        same = cluster_of[nbr] == ci
        pairs = sorted(zip(nbr[same].tolist(), w[same].tolist()), key=lambda t: (-t[1], t[0]))
        within.append(tuple(pairs))
    return ConstraintSet(
        g.n_features,
        tuple(sorted(bidirectional_set(g))),
        tuple(tuple(m) for m in cl),
        protos,
        forest.cost.copy(),
        tuple(within),
        g.constant_features,
    )


# ------------------------------------------------------------------ checks


@dataclass(frozen=True)
class Perturbation:
    base: frozenset[int]
    primary_added: tuple[int, ...] = ()
    side_effect_added: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "base", frozenset(int(f) for f in self.base))
        object.__setattr__(self, "primary_added", tuple(int(f) for f in self.primary_added))
        object.__setattr__(self, "side_effect_added", tuple(int(f) for f in self.side_effect_added))
        added = self.primary_added + self.side_effect_added
        if len(set(added)) != len(added):
            raise ValueError("added features must be distinct")
        if self.base.intersection(added):
            raise ValueError("perturbations only add features absent from the base")

    @property
    def added(self) -> tuple[int, ...]:
        return self.primary_added + self.side_effect_added

    @property
    def x_prime(self) -> frozenset[int]:
        return self.base.union(self.added)


def feature_satisfied(cs: ConstraintSet, x_prime: Iterable[int], f: int) -> bool:
    """All perfect partners of ``f`` present, and at least one cluster-mate
    present when ``f`` sits in a cluster of two or more."""
    xs = x_prime if isinstance(x_prime, (set, frozenset)) else set(x_prime)
    if f not in xs:
        raise ValueError(f"feature {f} is not present in x'")
    for g in cs.partners.get(f, ()):
        if g not in xs:
            return False
    mates = cs.mates(f)
    if mates and not any(g in xs for g in mates):
        return False
    return True


def csr(cs: ConstraintSet, p: Perturbation) -> float | None:
    """Fraction of added features satisfying the constraints in x'; None if
    nothing was added."""
    added = p.added
    if not added:
        return None
    xs = p.x_prime
    return sum(feature_satisfied(cs, xs, f) for f in added) / len(added)


def _companion(cs: ConstraintSet, f: int, mode: str) -> int:
    if mode == "prototype":
        p = cs.prototypes[cs.cluster_of[f]]
        if p != f:
            return p
    if cs.phi_within[f]:
        return cs.phi_within[f][0][0]
    return min(cs.mates(f))


def close(cs: ConstraintSet, present: set[int], new: Sequence[int], mode: str = "phi") -> list[int]:
    """Side-effect features needed so every feature in ``new`` (and every
    feature this pulls in) is satisfied. ``present`` is updated in place."""
    if mode not in REPAIR_MODES:
        raise ValueError(f"unknown repair mode {mode!r}")
    side: list[int] = []
    queue = deque(new)
    while queue:
        f = queue.popleft()
        for g in cs.partners.get(f, ()):
            if g not in present:
                present.add(g)
                side.append(g)
                queue.append(g)
        mates = cs.mates(f)
        if mates and not any(g in present for g in mates):
            g = _companion(cs, f, mode)
            present.add(g)
            side.append(g)
            queue.append(g)
    return side


def repair(cs: ConstraintSet, p: Perturbation, mode: str = "phi") -> Perturbation:
    """Add side-effect features until every added feature is satisfied."""
    present = set(p.x_prime)
    extra = close(cs, present, p.added, mode)
    return Perturbation(p.base, p.primary_added, p.side_effect_added + tuple(extra))


def violations(cs: ConstraintSet, row: Iterable[int]) -> list[int]:
    """Features of a raw sample that break a constraint (reported, never fixed)."""
    xs = set(int(f) for f in row)
    return sorted(f for f in xs if not feature_satisfied(cs, xs, f))
