"""Linear SVM detector trained by Pegasos-style hinge-loss subgradient
descent with sparse updates, plus TPR/FPR evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .dataset import SparseBinaryDataset
from .errors import ArtifactError, DataError

MODEL_VERSION = 1


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise ValueError("model parameters must be finite")

    @property
    def feature_dim(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "dim": self.feature_dim,
            "bias": self.bias,
            "weights": self.weights.tolist(),
            "train_meta": self.train_meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LinearModel":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise ArtifactError(path, f"cannot read model: {exc}", MODEL_VERSION) from None
        if doc.get("version", MODEL_VERSION) != MODEL_VERSION:
            raise ArtifactError(path, f"unsupported model version {doc.get('version')!r}", MODEL_VERSION)
        try:
            w = np.asarray(doc["weights"], dtype=np.float64)
            if len(w) != int(doc["dim"]):
                raise ValueError("weights length does not match dim")
            return cls(w, float(doc["bias"]), doc.get("train_meta", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(path, f"malformed model: {exc}", MODEL_VERSION) from None


# ------------------------------------------------------------------ objective


def hinge_objective(w: np.ndarray, b: float, X: np.ndarray, y01: np.ndarray, lam: float) -> float:
    """lam/2 (|w|^2 + b^2) + mean hinge loss; labels in {0, 1}."""
    y = 2.0 * np.asarray(y01, dtype=np.float64) - 1.0
    margins = y * (X @ w + b)
    return 0.5 * lam * (w @ w + b * b) + np.mean(np.maximum(0.0, 1.0 - margins))


def hinge_subgradient(w: np.ndarray, b: float, x: np.ndarray, y01: int, lam: float) -> tuple[np.ndarray, float]:
    """Subgradient of the single-sample objective at (w, b) for dense ``x``."""
    y = 2.0 * y01 - 1.0
    gw = lam * w
    gb = lam * b
    if y * (x @ w + b) < 1.0:
        gw = gw - y * x
        gb = gb - y
    return gw, gb


class _Pegasos:
    """w = scale * v, so the L2 shrink is O(1) and the data term touches only
    the present features. The bias is a regularised constant feature."""

    def __init__(self, dim: int, lam: float):
        self.v = np.zeros(dim)
        self.scale = 1.0
        self.b = 0.0
        self.lam = lam

    def margin_value(self, idx: np.ndarray) -> float:
        return self.scale * self.v[idx].sum() + self.b

    def step(self, idx: np.ndarray, y01: int, eta: float) -> None:
        """w <- w - eta * subgradient(w, b, x, y)."""
        y = 2.0 * y01 - 1.0
        violated = y * self.margin_value(idx) < 1.0
        shrink = 1.0 - eta * self.lam
        if shrink <= 0.0:
            self.v[:] = 0.0
            self.scale = 1.0
            self.b = 0.0
        else:
            self.scale *= shrink
            self.b *= shrink
        if violated:
            self.v[idx] += eta * y / self.scale
            self.b += eta * y
        if self.scale < 1e-9:
            self.v *= self.scale
            self.scale = 1.0

    @property
    def w(self) -> np.ndarray:
        return self.scale * self.v


def train(
    ds: SparseBinaryDataset,
    epochs: int = 10,
    lam: float = 1e-4,
    seed: int = 0,
) -> LinearModel:
    """Epoch-shuffled subgradient descent with step 1/(lam t)."""
    labels = ds.labels
    if ds.n_samples == 0 or len(np.unique(labels)) < 2:
        raise DataError("training needs both benign and malicious samples")
    if len(ds.indices) == 0:
        raise DataError("every row is empty: no feature carries information")
    if epochs < 1 or lam <= 0:
        raise ValueError("epochs must be >= 1 and lam > 0")
    rng = np.random.default_rng(seed)
    state = _Pegasos(ds.n_features, lam)
    rows = [ds.row(i) for i in range(ds.n_samples)]
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(ds.n_samples):
            t += 1
            state.step(rows[i], int(labels[i]), 1.0 / (lam * t))
    meta = {"epochs": epochs, "lam": lam, "seed": seed, "schedule": "1/(lam*t)"}
    return LinearModel(state.w, state.b, meta)


# ------------------------------------------------------------------ inference


def decision(m: LinearModel, x: Iterable[int]) -> float:
    idx = np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= m.feature_dim):
        raise IndexError(f"feature index out of range [0, {m.feature_dim})")
    return float(m.weights[idx].sum() + m.bias)


def predict(m: LinearModel, x: Iterable[int]) -> int:
    """1 (malicious) when the decision is >= 0; a zero score counts as malicious."""
    return int(decision(m, x) >= 0.0)


def decisions(m: LinearModel, ds: SparseBinaryDataset) -> np.ndarray:
    if ds.n_features != m.feature_dim:
        raise DataError(f"dataset has {ds.n_features} features, model expects {m.feature_dim}")
    return np.array([decision(m, r) for r in ds.rows()])


@dataclass(frozen=True)
class EvalReport:
    tpr: float | None
    fpr: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    train_time: float | None = None

    @property
    def confusion(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.tn, self.fn

    def to_dict(self) -> dict:
        return {"tpr": self.tpr, "fpr": self.fpr, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "train_time": self.train_time}


def report_from_predictions(y_true, y_pred, train_time: float | None = None) -> EvalReport:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_true == 1) & (y_pred == 1)))
    fn = int(np.sum((y_true == 1) & (y_pred == 0)))
    fp = int(np.sum((y_true == 0) & (y_pred == 1)))
    tn = int(np.sum((y_true == 0) & (y_pred == 0)))
    tpr = tp / (tp + fn) if tp + fn else None
    fpr = fp / (fp + tn) if fp + tn else None
    return EvalReport(tpr, fpr, tp, fp, tn, fn, train_time)


def evaluate(m: LinearModel, ds: SparseBinaryDataset, train_time: float | None = None) -> EvalReport:
    pred = (decisions(m, ds) >= 0.0).astype(int)
    return report_from_predictions(ds.labels, pred, train_time)


def timed_train(ds: SparseBinaryDataset, **hp) -> tuple[LinearModel, float]:
    t0 = time.perf_counter()
    m = train(ds, **hp)
    return m, time.perf_counter() - t0
