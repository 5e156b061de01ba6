"""Sparse binary feature corpora: loading, saving, top-k selection and
synthetic generation with planted dependency structure."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError

log = logging.getLogger(__name__)

FORMATS = ("sparse-text", "dense-csv")


@dataclass(frozen=True, eq=False)
class SparseBinaryDataset:
    """Row-sparse binary matrix with labels (0 benign, 1 malicious).

    Rows are stored CSR-style: the present features of sample ``i`` are
    ``indices[indptr[i]:indptr[i + 1]]``, strictly increasing.
    """

    n_features: int
    indptr: np.ndarray
    indices: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int8)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "labels", labels)
        for arr in (indptr, indices, labels):
            arr.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        n = len(self.indptr) - 1
        if n < 0 or self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise DataError("malformed row pointer array")
        if np.any(np.diff(self.indptr) < 0):
            raise DataError("row pointers must be non-decreasing")
        if len(self.labels) != n:
            raise DataError(f"expected {n} labels, got {len(self.labels)}")
        if n and not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")
        if len(self.indices):
            if self.indices.min() < 0 or self.indices.max() >= self.n_features:
                raise DataError(f"feature index out of range [0, {self.n_features})")
            # strictly increasing within every row
            step = np.diff(self.indices)
            row_start = np.zeros(len(self.indices), dtype=bool)
            row_start[self.indptr[:-1][np.diff(self.indptr) > 0]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise DataError("indices within a row must be strictly increasing")
        if self.feature_names is not None and len(self.feature_names) != self.n_features:
            raise DataError("feature_names length does not match n_features")

    @classmethod
    def from_rows(
        cls,
        rows: Iterable[Iterable[int]],
        labels: Sequence[int],
        n_features: int,
        feature_names: Sequence[str] | None = None,
    ) -> "SparseBinaryDataset":
        """Build from arbitrary index collections; duplicates collapse with a warning."""
        indptr = [0]
        chunks = []
        n_dups = 0
        for row in rows:
            arr = np.asarray(list(row), dtype=np.int64)
            uniq = np.unique(arr)
            n_dups += len(arr) - len(uniq)
            chunks.append(uniq)
            indptr.append(indptr[-1] + len(uniq))
        if n_dups:
            log.warning("collapsed %d duplicate feature indices", n_dups)
        indices = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
        names = tuple(feature_names) if feature_names is not None else None
        return cls(n_features, np.asarray(indptr), indices, np.asarray(labels), names)

    @classmethod
    def from_dense(cls, X: np.ndarray, y: Sequence[int], feature_names=None) -> "SparseBinaryDataset":
        X = np.asarray(X)
        if X.ndim != 2:
            raise DataError("dense matrix must be 2-D")
        if not np.all((X == 0) | (X == 1)):
            raise DataError("dense matrix must be binary")
        m = sp.csr_matrix(X.astype(np.int8))
        m.sort_indices()
        names = tuple(feature_names) if feature_names is not None else None
        return cls(X.shape[1], m.indptr, m.indices, np.asarray(y), names)

    @property
    def n_samples(self) -> int:
        return len(self.indptr) - 1

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def rows(self) -> Iterator[np.ndarray]:
        for i in range(self.n_samples):
            yield self.row(i)

    def matrix(self, dtype=np.int64) -> sp.csr_matrix:
        data = np.ones(len(self.indices), dtype=dtype)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n_samples, self.n_features))

    def dense(self) -> np.ndarray:
        return self.matrix(np.int8).toarray()

    def stats(self) -> "FeatureStats":
        return FeatureStats.from_dataset(self)

    def subset(self, idx: Sequence[int]) -> "SparseBinaryDataset":
        idx = np.asarray(idx, dtype=np.int64)
        rows = [self.row(i) for i in idx]
        lens = np.array([len(r) for r in rows], dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(lens)])
        indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        return SparseBinaryDataset(self.n_features, indptr, indices, self.labels[idx], self.feature_names)

    def concat(self, other: "SparseBinaryDataset") -> "SparseBinaryDataset":
        if other.n_features != self.n_features:
            raise DataError(f"dimension mismatch: {self.n_features} vs {other.n_features}")
        indptr = np.concatenate([self.indptr, other.indptr[1:] + self.indptr[-1]])
        return SparseBinaryDataset(
            self.n_features,
            indptr,
            np.concatenate([self.indices, other.indices]),
            np.concatenate([self.labels, other.labels]),
            self.feature_names,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseBinaryDataset):
            return NotImplemented
        return (
            self.n_features == other.n_features
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureStats:
    """Per-feature presence counts and posting lists (sorted row ids)."""

    presence_count: np.ndarray
    post_ptr: np.ndarray
    post_rows: np.ndarray

    @classmethod
    def from_dataset(cls, ds: SparseBinaryDataset) -> "FeatureStats":
        csc = ds.matrix(np.int8).tocsc()
        csc.sort_indices()
        counts = np.diff(csc.indptr).astype(np.int64)
        return cls(counts, csc.indptr.astype(np.int64), csc.indices.astype(np.int64))

    def posting(self, f: int) -> np.ndarray:
        return self.post_rows[self.post_ptr[f]:self.post_ptr[f + 1]]


# ---------------------------------------------------------------- I/O


def _parse_sparse_text(lines: Iterable[str], source: str) -> SparseBinaryDataset:
    it = iter(enumerate(lines, start=1))
    n_features = None
    rows, labels = [], []
    n_dups = 0
    for lineno, raw in it:
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if n_features is None and line[1:].strip().startswith("d="):
                try:
                    n_features = int(line[1:].strip()[2:])
                except ValueError:
                    raise DataError(f"{source}:{lineno}: bad header {line!r}") from None
                if n_features < 0:
                    raise DataError(f"{source}:{lineno}: negative dimension")
            continue
        if n_features is None:
            raise DataError(f"{source}:{lineno}: missing '#d=<n_features>' header")
        toks = line.split()
        try:
            vals = [int(t) for t in toks]
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-integer token in {line!r}") from None
        if vals[0] not in (0, 1):
            raise DataError(f"{source}:{lineno}: label must be 0 or 1, got {vals[0]}")
        idx = vals[1:]
        for v in idx:
            if v < 0 or v >= n_features:
                raise DataError(f"{source}:{lineno}: index {v} out of range [0, {n_features})")
        uniq = sorted(set(idx))
        if len(uniq) != len(idx):
            n_dups += len(idx) - len(uniq)
            log.warning("%s:%d: duplicate feature indices collapsed", source, lineno)
        labels.append(vals[0])
        rows.append(uniq)
    if n_features is None:
        raise DataError(f"{source}: empty file (no '#d=' header)")
    return SparseBinaryDataset.from_rows(rows, labels, n_features)


def _parse_dense_csv(lines: Iterable[str], source: str) -> SparseBinaryDataset:
    rows, labels = [], []
    names = None
    d = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        cells = [c.strip() for c in line.split(",")]
        if lineno == 1 and cells[0].lower() == "label":
            names = cells[1:]
            d = len(names)
            continue
        if d is None:
            d = len(cells) - 1
        if len(cells) - 1 != d:
            raise DataError(f"{source}:{lineno}: expected {d + 1} columns, got {len(cells)}")
        if any(c not in ("0", "1") for c in cells):
            raise DataError(f"{source}:{lineno}: non-binary value in {line!r}")
        labels.append(int(cells[0]))
        rows.append([j for j, c in enumerate(cells[1:]) if c == "1"])
    if d is None:
        raise DataError(f"{source}: empty file")
    return SparseBinaryDataset.from_rows(rows, labels, d, names)


def load(path, format: str = "sparse-text", vocab=None) -> SparseBinaryDataset:
    """Load a dataset; ``vocab`` optionally names features (one per line)."""
    path = Path(path)
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open("r", encoding="ascii", newline="") as fh:
        if format == "sparse-text":
            ds = _parse_sparse_text(fh, str(path))
        else:
            ds = _parse_dense_csv(fh, str(path))
    if vocab is not None:
        names = Path(vocab).read_text(encoding="utf-8").splitlines()
        if len(names) != ds.n_features:
            raise DataError(f"{vocab}: {len(names)} names for {ds.n_features} features")
        ds = SparseBinaryDataset(ds.n_features, ds.indptr, ds.indices, ds.labels, tuple(names))
    return ds


def dumps(ds: SparseBinaryDataset) -> str:
    out = [f"#d={ds.n_features}\n"]
    for label, row in zip(ds.labels, ds.rows()):
        if len(row):
            out.append(f"{int(label)} {' '.join(map(str, row.tolist()))}\n")
        else:
            out.append(f"{int(label)}\n")
    return "".join(out)


def save(ds: SparseBinaryDataset, path, vocab=None) -> None:
    Path(path).write_text(dumps(ds), encoding="ascii", newline="\n")
    if vocab is not None and ds.feature_names is not None:
        Path(vocab).write_text("".join(f"{n}\n" for n in ds.feature_names), encoding="utf-8")


# ---------------------------------------------------------------- selection


def select_top_k(
    ds: SparseBinaryDataset, k: int, malware_only: bool = False
) -> tuple[SparseBinaryDataset, dict[int, int]]:
    """Keep the ``k`` most frequent features (ties: lower index) and remap them
    densely in ascending original order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= ds.n_features:
        return ds, {f: f for f in range(ds.n_features)}
    src = ds.subset(np.flatnonzero(ds.labels == 1)) if malware_only else ds
    counts = np.bincount(src.indices, minlength=ds.n_features)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(ds.n_features), -counts))
    keep = np.sort(order[:k])
    remap = np.full(ds.n_features, -1, dtype=np.int64)
    remap[keep] = np.arange(k)
    new_idx = remap[ds.indices]
    mask = new_idx >= 0
    row_of = np.repeat(np.arange(ds.n_samples), np.diff(ds.indptr))
    lens = np.bincount(row_of[mask], minlength=ds.n_samples)
    indptr = np.concatenate([[0], np.cumsum(lens)])
    names = tuple(ds.feature_names[f] for f in keep) if ds.feature_names else None
    out = SparseBinaryDataset(k, indptr, new_idx[mask], ds.labels, names)
    return out, {int(f): i for i, f in enumerate(keep)}


# ---------------------------------------------------------------- synthesis


@dataclass
class Block:
    """A co-occurrence block: activated as a unit, members then drawn
    conditionally. ``core`` members are present whenever the block is on."""

    members: list[int]
    activation: float | tuple[float, float] = 0.2
    member_prob: float | tuple[float, float] = 0.95
    core: list[int] = field(default_factory=list)


@dataclass
class PlantedSpec:
    n_samples: int
    n_features: int
    duplicate_groups: list[list[int]] = field(default_factory=list)
    blocks: list[Block] = field(default_factory=list)
    group_activation: float | tuple[float, float] = 0.2
    noise: float = 0.0
    malware_fraction: float = 0.5
    # (benign, malicious) rate for each feature outside every group/block
    background: Sequence[tuple[float, float]] | None = None

    def check(self) -> None:
        seen: dict[int, str] = {}
        for gi, g in enumerate(self.duplicate_groups):
            if len(g) < 2:
                raise DataError(f"duplicate group {gi} needs at least 2 features")
            for f in g:
                if not 0 <= f < self.n_features:
                    raise DataError(f"duplicate group {gi}: feature {f} out of range")
                if f in seen:
                    raise DataError(f"feature {f} in both {seen[f]} and duplicate group {gi}")
                seen[f] = f"duplicate group {gi}"
        block_seen: dict[int, int] = {}
        for bi, b in enumerate(self.blocks):
            for f in b.members:
                if not 0 <= f < self.n_features:
                    raise DataError(f"block {bi}: feature {f} out of range")
                if f in block_seen:
                    raise DataError(f"feature {f} in blocks {block_seen[f]} and {bi}")
                block_seen[f] = bi
            if not set(b.core) <= set(b.members):
                raise DataError(f"block {bi}: core must be a subset of members")
        for gi, g in enumerate(self.duplicate_groups):
            owners = {block_seen.get(f) for f in g}
            if len(owners) > 1:
                raise DataError(f"duplicate group {gi} straddles a block boundary")
        if not 0.0 <= self.noise < 1.0:
            raise DataError("noise must be in [0, 1)")
        if self.background is not None and len(self.background) != self.n_features:
            raise DataError("background must give one rate pair per feature")


def _by_label(p, y: np.ndarray) -> np.ndarray:
    if isinstance(p, (tuple, list)):
        return np.where(y == 1, p[1], p[0])
    return np.full(len(y), float(p))


def synth_planted(spec: PlantedSpec, seed: int = 0) -> SparseBinaryDataset:
    """Draw a corpus whose duplicate groups are bitwise-identical columns and
    whose blocks co-occur far more than they do across blocks."""
    spec.check()
    rng = np.random.default_rng(seed)
    n, d = spec.n_samples, spec.n_features
    y = (rng.random(n) < spec.malware_fraction).astype(np.int8)
    X = np.zeros((n, d), dtype=bool)

    group_of = {f: gi for gi, g in enumerate(spec.duplicate_groups) for f in g}
    in_block = set()
    for b in spec.blocks:
        on = rng.random(n) < _by_label(b.activation, y)
        in_block.update(b.members)
        # units: nested duplicate groups move together
        units: list[list[int]] = []
        done = set()
        for f in b.members:
            if f in done:
                continue
            unit = spec.duplicate_groups[group_of[f]] if f in group_of else [f]
            units.append(sorted(unit))
            done.update(unit)
        core = set(b.core)
        for unit in units:
            if core.intersection(unit):
                present = on
            else:
                present = on & (rng.random(n) < _by_label(b.member_prob, y))
            X[:, unit] = present[:, None]
    for gi, g in enumerate(spec.duplicate_groups):
        if g[0] in in_block:
            continue
        present = rng.random(n) < _by_label(spec.group_activation, y)
        X[:, g] = present[:, None]
    if spec.background is not None:
        planted = in_block | set(group_of)
        free = np.array([f for f in range(d) if f not in planted], dtype=np.int64)
        if len(free):
            rates = np.asarray(spec.background, dtype=float)[free]
            p = np.where(y[:, None] == 1, rates[:, 1], rates[:, 0])
            X[:, free] = rng.random((n, len(free))) < p
    if spec.noise > 0:
        X |= rng.random((n, d)) < spec.noise
    return SparseBinaryDataset.from_dense(X.astype(np.int8), y)
