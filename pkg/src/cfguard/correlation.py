"""Contingency tables, phi coefficients and the positive-weight phi graph."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, TextIO

import numpy as np
import scipy.sparse as sp

from .dataset import FeatureStats, SparseBinaryDataset


@dataclass(frozen=True)
class ContingencyTable:
    a: int  # both present
    b: int  # first only
    c: int  # second only
    d: int  # neither

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError(f"negative count in {self}")

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


def contingency(ds: SparseBinaryDataset | FeatureStats, i: int, j: int, n: int | None = None) -> ContingencyTable:
    """2x2 table for features ``i`` and ``j`` via posting-list intersection."""
    if i == j:
        raise ValueError("contingency needs two distinct features")
    if isinstance(ds, SparseBinaryDataset):
        n = ds.n_samples
        stats = ds.stats()
        d = ds.n_features
    else:
        if n is None:
            raise ValueError("n is required when passing FeatureStats")
        stats = ds
        d = len(stats.presence_count)
    if not (0 <= i < d and 0 <= j < d):
        raise IndexError(f"feature index out of range [0, {d})")
    pi, pj = stats.posting(i), stats.posting(j)
    a = len(np.intersect1d(pi, pj, assume_unique=True))
    b = len(pi) - a
    c = len(pj) - a
    return ContingencyTable(a, b, c, n - a - b - c)


def _denominator(r1, r2):
    # sqrt(r1) * sqrt(r2) is not exact for r1 == r2; that case covers +/-1
    if r1 == r2:
        return float(r1)
    return math.sqrt(r1) * math.sqrt(r2)


def phi(t: ContingencyTable) -> float | None:
    """Phi coefficient, or ``None`` when a marginal is zero (constant feature)."""
    a, b, c, d = t.a, t.b, t.c, t.d
    r1 = (a + b) * (c + d)
    r2 = (a + c) * (b + d)
    if r1 == 0 or r2 == 0:
        return None
    return (a * d - b * c) / _denominator(r1, r2)


def phi_from_counts(a, ni, nj, n) -> np.ndarray:
    """Vectorised phi from co-occurrence ``a``, marginals ``ni``/``nj`` and size
    ``n``; NaN where undefined. Bitwise equal to :func:`phi` element-wise."""
    a = np.asarray(a, dtype=np.int64)
    ni = np.asarray(ni, dtype=np.int64)
    nj = np.asarray(nj, dtype=np.int64)
    b = ni - a
    c = nj - a
    d = n - a - b - c
    r1 = ni * (n - ni)
    r2 = nj * (n - nj)
    num = (a * d - b * c).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        den = np.where(r1 == r2, r1.astype(np.float64), np.sqrt(r1.astype(np.float64)) * np.sqrt(r2.astype(np.float64)))
        out = num / den
    out[(r1 == 0) | (r2 == 0)] = np.nan
    return out


@dataclass(frozen=True, eq=False)
class PhiGraph:
    """Symmetric graph over features holding only positive phi edges."""

    n_features: int
    adj: sp.csr_matrix
    perfect_pairs: tuple[tuple[int, int], ...] = ()
    constant_features: tuple[int, ...] = ()
    n_samples: int = 0

    def neighbors(self, f: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.adj.indptr[f], self.adj.indptr[f + 1]
        return self.adj.indices[lo:hi], self.adj.data[lo:hi]

    def weight(self, i: int, j: int) -> float:
        """Edge weight, 0.0 when no (positive) edge exists."""
        nbr, w = self.neighbors(i)
        k = np.searchsorted(nbr, j)
        if k < len(nbr) and nbr[k] == j:
            return float(w[k])
        return 0.0

    def edges(self) -> Iterator[tuple[int, int, float]]:
        coo = sp.triu(self.adj, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        for k in order:
            yield int(coo.row[k]), int(coo.col[k]), float(coo.data[k])

    @property
    def n_edges(self) -> int:
        return self.adj.nnz // 2

    @classmethod
    def from_edges(cls, n_features: int, edges, perfect_pairs=(), constant_features=()) -> "PhiGraph":
        """Build directly from ``(i, j, w)`` triples (w > 0); mostly for tests."""
        rows, cols, vals = [], [], []
        for i, j, w in edges:
            if i == j:
                raise ValueError("self loops are not allowed")
            if not w > 0:
                raise ValueError(f"edge ({i},{j}) weight {w} is not positive")
            rows += [i, j]
            cols += [j, i]
            vals += [float(w), float(w)]
        adj = sp.csr_matrix((vals, (rows, cols)), shape=(n_features, n_features))
        adj.sum_duplicates()
        adj.sort_indices()
        pairs = tuple(sorted((min(p), max(p)) for p in perfect_pairs))
        return cls(n_features, adj, pairs, tuple(sorted(constant_features)))


def _cooccurrence_block(Xc: sp.csc_matrix, lo: int, hi: int) -> sp.coo_matrix:
    # counts for pairs (i, j) with j in [lo, hi) and i < j
    block = (Xc.T @ Xc[:, lo:hi]).tocoo()
    keep = block.row < block.col + lo
    return sp.coo_matrix(
        (block.data[keep], (block.row[keep], block.col[keep] + lo)), shape=(Xc.shape[1], Xc.shape[1])
    )


def build_phi_graph(ds: SparseBinaryDataset, min_phi: float = 0.0, threads: int = 1, block_size: int = 1024) -> PhiGraph:
    """Phi over all co-occurring feature pairs, keeping ``phi > min_phi``.

    Pairs that never co-occur have ``a = 0`` and hence ``phi <= 0``, so the
    sparse co-occurrence product loses no positive edge.
    """
    if not 0.0 <= min_phi < 1.0:
        raise ValueError("min_phi must lie in [0, 1)")
    n, d = ds.n_samples, ds.n_features
    X = ds.matrix(np.int64).tocsc()
    counts = np.diff(X.indptr).astype(np.int64)
    constant = np.flatnonzero((counts == 0) | (counts == n))

    bounds = [(lo, min(lo + block_size, d)) for lo in range(0, d, block_size)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda b: _cooccurrence_block(X, *b), bounds))
    else:
        parts = [_cooccurrence_block(X, *b) for b in bounds]
    rows = np.concatenate([p.row for p in parts]) if parts else np.zeros(0, np.int64)
    cols = np.concatenate([p.col for p in parts]) if parts else np.zeros(0, np.int64)
    a = np.concatenate([p.data for p in parts]) if parts else np.zeros(0, np.int64)
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)

    ni, nj = counts[rows], counts[cols]
    w = phi_from_counts(a, ni, nj, n)
    keep = ~np.isnan(w) & (w > min_phi)
    rows, cols, w, a, ni, nj = rows[keep], cols[keep], w[keep], a[keep], ni[keep], nj[keep]

    # integer test: b == 0 and c == 0 and a > 0 and d > 0
    perfect = (ni == a) & (nj == a) & (a > 0) & (n - a > 0)
    pairs = tuple(sorted(zip(rows[perfect].tolist(), cols[perfect].tolist())))

    adj = sp.csr_matrix(
        (np.concatenate([w, w]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(d, d),
    )
    adj.sort_indices()
    return PhiGraph(d, adj, pairs, tuple(constant.tolist()), n)


def bidirectional_set(g: PhiGraph) -> set[tuple[int, int]]:
    """Pairs with phi exactly +1 (identical, non-constant columns)."""
    return set(g.perfect_pairs)


def dump_edges(g: PhiGraph, fh: TextIO) -> None:
    for i, j, w in g.edges():
        fh.write(f"{i} {j} {w:.9g}\n")
