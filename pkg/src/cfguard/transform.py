"""Robust feature representation: one sigmoid-gated output per cluster,
pass-through for the remaining (non-constant) features."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .constraints import ConstraintSet
from .dataset import SparseBinaryDataset
from .errors import ArtifactError

log = logging.getLogger(__name__)

THRESHOLD = 0.7
MAP_VERSION = 1


def sigmoid(s: float) -> float:
    return 1.0 / (1.0 + math.exp(-s))


@dataclass(frozen=True, eq=False)
class RobustMap:
    n_in: int
    clusters: tuple[tuple[int, tuple[int, ...], tuple[float, ...]], ...]
    passthrough: tuple[tuple[int, int], ...]
    threshold: float = THRESHOLD
    dropped: tuple[int, ...] = ()
    # lookup tables: input feature -> cluster slot / cost / pass-through output
    _slot: np.ndarray = field(init=False, repr=False)
    _cost: np.ndarray = field(init=False, repr=False)
    _pass: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        slot = np.full(self.n_in, -1, dtype=np.int64)
        cost = np.zeros(self.n_in, dtype=np.float64)
        pas = np.full(self.n_in, -1, dtype=np.int64)
        used = []
        for k, (out, members, costs) in enumerate(self.clusters):
            used.append(out)
            for f, c in zip(members, costs):
                if slot[f] != -1:
                    raise ValueError(f"feature {f} mapped twice")
                slot[f] = k
                cost[f] = c
        for out, f in self.passthrough:
            used.append(out)
            if slot[f] != -1 or pas[f] != -1:
                raise ValueError(f"feature {f} mapped twice")
            pas[f] = out
        if sorted(used) != list(range(len(used))):
            raise ValueError("output indices must cover 0..out_dim-1 exactly once")
        object.__setattr__(self, "_slot", slot)
        object.__setattr__(self, "_cost", cost)
        object.__setattr__(self, "_pass", pas)

    @property
    def out_dim(self) -> int:
        return len(self.clusters) + len(self.passthrough)

    def cluster_sums(self, x: Iterable[int]) -> np.ndarray:
        """Path-cost weighted activation s for each cluster slot."""
        x = np.unique(np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=np.int64))
        s = np.zeros(len(self.clusters), dtype=np.float64)
        inc = x[self._slot[x] >= 0]
        # accumulate in ascending feature order (np.add.at is sequential)
        np.add.at(s, self._slot[inc], self._cost[inc])
        return s

    def gate(self, s: np.ndarray) -> np.ndarray:
        return np.array([sigmoid(v) > self.threshold for v in s], dtype=bool)

    def to_dict(self) -> dict:
        return {
            "version": MAP_VERSION,
            "n_in": self.n_in,
            "threshold": self.threshold,
            "clusters": [{"out": o, "members": list(m), "costs": list(c)} for o, m, c in self.clusters],
            "passthrough": [[o, f] for o, f in self.passthrough],
            "dropped": list(self.dropped),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RobustMap":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise ArtifactError(path, f"cannot read map: {exc}", MAP_VERSION) from None
        if doc.get("version") != MAP_VERSION:
            raise ArtifactError(path, f"unsupported map version {doc.get('version')!r}", MAP_VERSION)
        return cls(
            int(doc["n_in"]),
            tuple((int(c["out"]), tuple(c["members"]), tuple(float(v) for v in c["costs"])) for c in doc["clusters"]),
            tuple((int(o), int(f)) for o, f in doc["passthrough"]),
            float(doc["threshold"]),
            tuple(doc.get("dropped", ())),
        )


def build_map(cs: ConstraintSet, threshold: float = THRESHOLD, drop_singletons: bool = False) -> RobustMap:
    """Cluster outputs first (ascending prototype), then pass-through features
    in ascending index order."""
    constant = set(cs.constant_features)
    clusters = []
    clustered = set()
    for members in cs.clusters:
        if len(members) < 2:
            continue
        live = tuple(f for f in members if f not in constant)
        clusters.append((len(clusters), live, tuple(float(cs.cost[f]) for f in live)))
        clustered.update(members)
    passthrough = []
    dropped = sorted(constant)
    if constant:
        log.info("dropping %d constant features", len(constant))
    if not drop_singletons:
        out = len(clusters)
        for f in range(cs.n_features):
            if f in clustered or f in constant:
                continue
            passthrough.append((out, f))
            out += 1
    else:
        dropped = sorted(set(range(cs.n_features)) - clustered)
    return RobustMap(cs.n_features, tuple(clusters), tuple(passthrough), threshold, tuple(dropped))


def apply(rmap: RobustMap, x: Iterable[int]) -> list[int]:
    """Present outputs of lambda(x), sorted."""
    x = np.unique(np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=np.int64))
    if len(x) and (x[0] < 0 or x[-1] >= rmap.n_in):
        raise IndexError(f"feature index out of range [0, {rmap.n_in})")
    on = rmap.gate(rmap.cluster_sums(x))
    outs = [rmap.clusters[k][0] for k in np.flatnonzero(on)]
    p = rmap._pass[x]
    outs.extend(p[p >= 0].tolist())
    return sorted(outs)


def apply_dataset(rmap: RobustMap, ds: SparseBinaryDataset) -> SparseBinaryDataset:
    if ds.n_features != rmap.n_in:
        raise ValueError(f"dataset has {ds.n_features} features, map expects {rmap.n_in}")
    rows = [apply(rmap, r) for r in ds.rows()]
    return SparseBinaryDataset.from_rows(rows, ds.labels, rmap.out_dim)
