"""Feature-addition evasion attacks on linear detectors.

The linear model's gradient is its weight vector, so the greedy attack adds
the absent feature with the most negative weight until the decision drops
below zero. In constrained mode every chosen feature drags its repair
closure along, and the whole closure is charged to the budget.

When the detector sits behind a robust transform the attacker still edits
input features; candidates are then ranked by the exact change in the
composed decision, falling back to the gradient of the sigmoid relaxation
when no single feature changes any output.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .constraints import ConstraintSet, Perturbation, close, csr
from .dataset import SparseBinaryDataset
from .detector import LinearModel, decision
from .errors import DataError
from .transform import RobustMap, apply as apply_map, sigmoid

MODES = ("unconstrained", "constrained")


@dataclass
class AttackConfig:
    max_added: int = 200
    mode: str = "unconstrained"
    constraint_set: ConstraintSet | None = None
    repair_mode: str = "phi"
    jitter_q: int = 5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "constrained" and self.constraint_set is None:
            raise ValueError("constrained mode needs a constraint set")
        if self.max_added < 0:
            raise ValueError("max_added must be >= 0")


@dataclass(frozen=True)
class AttackResult:
    perturbation: Perturbation
    evaded: bool
    decision_before: float
    decision_after: float

    @property
    def n_added_total(self) -> int:
        return len(self.perturbation.primary_added) + len(self.perturbation.side_effect_added)


class Detector:
    """A linear model, optionally applied after a robust transform."""

    def __init__(self, model: LinearModel, rmap: RobustMap | None = None):
        if rmap is not None and rmap.out_dim != model.feature_dim:
            raise DataError(f"map output dim {rmap.out_dim} != model dim {model.feature_dim}")
        self.model = model
        self.rmap = rmap

    @property
    def n_in(self) -> int:
        return self.rmap.n_in if self.rmap is not None else self.model.feature_dim

    def decision(self, x: Iterable[int]) -> float:
        if self.rmap is None:
            return decision(self.model, x)
        return decision(self.model, apply_map(self.rmap, x))


class _LinearRanker:
    def __init__(self, det: Detector):
        w = det.model.weights
        order = np.lexsort((np.arange(len(w)), w))
        self.order = [int(j) for j in order if w[j] < 0]
        self.pos = 0

    def ranked(self, present: set[int], blocked: set[int]):
        # present and blocked only grow, so a consumed prefix stays consumed
        order = self.order
        while self.pos < len(order) and (order[self.pos] in present or order[self.pos] in blocked):
            self.pos += 1
        for j in order[self.pos:]:
            if j not in present and j not in blocked:
                yield j


class _RobustRanker:
    def __init__(self, det: Detector):
        self.rmap = det.rmap
        self.w = det.model.weights
        rm = self.rmap
        self.out_of_slot = np.array([c[0] for c in rm.clusters], dtype=np.int64)
        self.w_slot = self.w[self.out_of_slot] if len(self.out_of_slot) else np.zeros(0)
        self.w_pass = np.where(rm._pass >= 0, self.w[np.maximum(rm._pass, 0)], 0.0)

    def ranked(self, present: set[int], blocked: set[int]) -> list[int]:
        rm = self.rmap
        absent = np.array(sorted(set(range(rm.n_in)) - present - blocked), dtype=np.int64)
        if not len(absent):
            return []
        s = rm.cluster_sums(np.fromiter(present, dtype=np.int64, count=len(present)))
        on = rm.gate(s)
        slot = rm._slot[absent]
        c = rm._cost[absent]
        delta = self.w_pass[absent].copy()
        grad = delta.copy()
        inc = slot >= 0
        if inc.any():
            sl = slot[inc]
            s_new = s[sl] + c[inc]
            flips = np.array([sigmoid(v) > rm.threshold for v in s_new]) & ~on[sl]
            delta[inc] = np.where(flips, self.w_slot[sl], 0.0)
            sig = np.array([sigmoid(v) for v in s[sl]])
            # inactive gates only: an active one cannot be switched off by additions
            grad[inc] = np.where(on[sl], 0.0, self.w_slot[sl] * sig * (1.0 - sig) * c[inc])
        if np.any(delta < 0):
            key, keep = delta, delta < 0
        else:
            key, keep = grad, grad < 0
        idx = np.flatnonzero(keep)
        idx = idx[np.lexsort((absent[idx], key[idx]))]
        return absent[idx].tolist()


def attack_sample(
    m: LinearModel | Detector,
    x: Iterable[int],
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Greedy feature-addition attack; ``rng`` enables top-q candidate jitter."""
    det = m if isinstance(m, Detector) else Detector(m)
    base = frozenset(int(f) for f in x)
    before = det.decision(sorted(base))
    if before < 0:
        raise DataError("sample is already classified benign")
    constrained = cfg.mode == "constrained"
    cs = cfg.constraint_set
    ranker = _LinearRanker(det) if det.rmap is None else _RobustRanker(det)

    present = set(base)
    primary: list[int] = []
    side: list[int] = []
    blocked: set[int] = set()
    current = before
    while current >= 0 and len(primary) + len(side) < cfg.max_added:
        stream = iter(ranker.ranked(present, blocked))
        head = list(itertools.islice(stream, max(cfg.jitter_q, 1) if rng is not None else 1))
        if not head:
            break
        if rng is not None and cfg.jitter_q > 1:
            k = int(rng.integers(len(head)))
            head = [head[k]] + head[:k] + head[k + 1:]
        cands = itertools.chain(head, stream)
        chosen = None
        for f in cands:
            if constrained:
                trial = set(present)
                trial.add(f)
                extra = close(cs, trial, [f], cfg.repair_mode)
                if len(primary) + len(side) + 1 + len(extra) > cfg.max_added:
                    blocked.add(f)
                    continue
            else:
                extra = []
            chosen = (f, extra)
            break
        if chosen is None:
            break
        f, extra = chosen
        primary.append(f)
        side.extend(extra)
        present.add(f)
        present.update(extra)
        current = det.decision(sorted(present))
    pert = Perturbation(base, tuple(primary), tuple(side))
    return AttackResult(pert, current < 0, before, current)


# ------------------------------------------------------------------ campaigns


@dataclass
class CampaignReport:
    records: list[dict]
    n_eligible: int
    er: float
    transfer_er: float
    avg_added: float | None
    csr_mean: float | None
    mode: str
    max_added: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "max_added": self.max_added,
            "n_eligible": self.n_eligible,
            "er": self.er,
            "transfer_er": self.transfer_er,
            "avg_added": self.avg_added,
            "csr_mean": self.csr_mean,
            "records": self.records,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def run_campaign(
    attacked: LinearModel | Detector,
    target: LinearModel | Detector | None,
    ds_malware: SparseBinaryDataset,
    cfg: AttackConfig,
    threads: int = 1,
) -> CampaignReport:
    """Attack every malware sample detected by both models; ER counts evasions
    of the attacked model, transfer ER counts successful examples that also
    evade the target. Both rates share the eligible set as denominator."""
    att = attacked if isinstance(attacked, Detector) else Detector(attacked)
    tgt = att if target is None else (target if isinstance(target, Detector) else Detector(target))
    if np.any(ds_malware.labels != 1):
        raise DataError("campaign input must contain malware only")
    eligible = [
        i for i in range(ds_malware.n_samples)
        if att.decision(ds_malware.row(i)) >= 0 and tgt.decision(ds_malware.row(i)) >= 0
    ]
    if not eligible:
        raise DataError("no malware sample is detected by both models")

    def one(i: int) -> tuple[int, AttackResult]:
        return i, attack_sample(att, ds_malware.row(i), cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, eligible))
    else:
        results = [one(i) for i in eligible]

    cs = cfg.constraint_set
    records = []
    n_evaded = n_transfer = 0
    added = []
    csrs = []
    for i, res in results:
        p = res.perturbation
        transferred = res.evaded and tgt.decision(sorted(p.x_prime)) < 0
        rate = csr(cs, p) if cs is not None else None
        if rate is not None:
            csrs.append(rate)
        if res.evaded:
            n_evaded += 1
            added.append(res.n_added_total)
        n_transfer += transferred
        records.append({
            "sample": i,
            "evaded": res.evaded,
            "transferred": bool(transferred),
            "n_added": res.n_added_total,
            "primary": list(p.primary_added),
            "side_effect": list(p.side_effect_added),
            "decision_before": res.decision_before,
            "decision_after": res.decision_after,
            "csr": rate,
        })
    n = len(eligible)
    return CampaignReport(
        records,
        n,
        n_evaded / n,
        n_transfer / n,
        float(np.mean(added)) if added else None,
        float(np.mean(csrs)) if csrs else None,
        cfg.mode,
        cfg.max_added,
    )


def adversarial_rows(report: CampaignReport, ds_malware: SparseBinaryDataset, only_evaded: bool = True) -> list[list[int]]:
    rows = []
    for rec in report.records:
        if only_evaded and not rec["evaded"]:
            continue
        base = ds_malware.row(rec["sample"]).tolist()
        rows.append(sorted(set(base) | set(rec["primary"]) | set(rec["side_effect"])))
    return rows
