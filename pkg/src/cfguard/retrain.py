"""Adversarial retraining: attack a random subset of the detected training
malware, append the successful variants as malware and train from scratch."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, attack_sample
from .constraints import csr
from .dataset import SparseBinaryDataset
from .detector import LinearModel, decision, train
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class RetrainConfig:
    # an int >= 1 is a sample count, a float in (0, 1] a fraction of the eligible malware
    malware_fraction: int | float = 0.2
    variants_per_sample: int = 1
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0

    def __post_init__(self):
        k = self.malware_fraction
        if isinstance(k, bool) or not isinstance(k, (int, float)):
            raise ValueError("malware_fraction must be a count or a ratio")
        if isinstance(k, int) and k < 1:
            raise ValueError("malware count must be >= 1")
        if isinstance(k, float) and not 0.0 < k <= 1.0:
            raise ValueError("malware ratio must be in (0, 1]")
        if self.variants_per_sample < 1:
            raise ValueError("variants_per_sample must be >= 1")

    def n_samples(self, n_eligible: int) -> int:
        k = self.malware_fraction
        if isinstance(k, int):
            return k
        return max(1, int(round(k * n_eligible)))


@dataclass(frozen=True)
class AdversarialSet:
    rows: list[list[int]]
    source: list[int]            # training-set row each variant came from
    n_attacked: int
    n_failed: int

    def dataset(self, n_features: int) -> SparseBinaryDataset:
        return SparseBinaryDataset.from_rows(self.rows, [1] * len(self.rows), n_features)


def generate_adv_set(
    model: LinearModel,
    ds: SparseBinaryDataset,
    cfg: RetrainConfig,
    threads: int = 1,
) -> AdversarialSet:
    """Attack a seeded uniform choice of the malware in ``ds`` detected by ``model``.

    Variant 0 of each sample is the plain greedy result; further variants use
    top-q candidate jitter from a per-sample rng, so the output does not
    depend on ``threads``. Duplicates and failed attacks are dropped.
    """
    mal = [int(i) for i in np.flatnonzero(ds.labels == 1) if decision(model, ds.row(i)) >= 0]
    if not mal:
        raise DataError("no detected malware to attack")
    k = cfg.n_samples(len(mal))
    if k > len(mal):
        raise DataError(f"asked for {k} malware samples but only {len(mal)} are detected")
    chosen = sorted(int(i) for i in np.random.default_rng(cfg.seed).choice(mal, size=k, replace=False))
    constrained = cfg.attack.mode == "constrained"

    def variants(i: int):
        rng = np.random.default_rng([cfg.seed, i])
        out = []
        for v in range(cfg.variants_per_sample):
            res = attack_sample(model, ds.row(i), cfg.attack, rng if v else None)
            if res.evaded and constrained and csr(cfg.attack.constraint_set, res.perturbation) not in (None, 1.0):
                raise RuntimeError(f"constrained variant of sample {i} breaks the constraints")
            out.append(res)
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(variants, chosen))
    else:
        results = [variants(i) for i in chosen]

    seen: set[tuple[int, ...]] = set()
    rows, source = [], []
    failed = 0
    for i, batch in zip(chosen, results):
        for res in batch:
            if not res.evaded:
                failed += 1
                continue
            key = tuple(sorted(res.perturbation.x_prime))
            if key in seen:
                continue
            seen.add(key)
            rows.append(list(key))
            source.append(i)
    log.info("attacked %d samples: %d variants kept, %d failed", len(chosen), len(rows), failed)
    return AdversarialSet(rows, source, len(chosen), failed)


def retrain(base: SparseBinaryDataset, adv: SparseBinaryDataset | AdversarialSet, **hp) -> LinearModel:
    """Fresh training on base plus adversarial malware."""
    if isinstance(adv, AdversarialSet):
        adv = adv.dataset(base.n_features)
    if adv.n_features != base.n_features:
        raise DataError(f"dimension mismatch: {base.n_features} vs {adv.n_features}")
    if adv.n_samples and np.any(adv.labels != 1):
        raise DataError("adversarial examples must be labelled malicious")
    return train(base.concat(adv), **hp)
