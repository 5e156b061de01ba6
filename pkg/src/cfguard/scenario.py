"""Ready-made synthetic corpora with known structure.

``recovery`` plants a handful of duplicate groups inside tight co-occurrence
blocks, so the learned constraints can be checked against ground truth.

``detection`` imitates app features at toy scale: every feature belongs to a
small functionality block whose first two features are an inseparable pair.
Malicious blocks fire more often in malware. Benign blocks have a rare core
shared by both classes, while their satellite features almost only show up
in benign apps. Neutral blocks carry no label signal.
"""

from __future__ import annotations

import numpy as np

from .dataset import Block, PlantedSpec, SparseBinaryDataset, synth_planted

PRESETS = ("recovery", "detection")


def recovery_spec(n_samples: int = 20_000) -> PlantedSpec:
    """4 blocks over 24 features, 5 duplicate pairs nested in them."""
    blocks = [Block(list(range(6 * b, 6 * b + 6)), activation=0.2, member_prob=0.97) for b in range(4)]
    dups = [[0, 1], [6, 7], [12, 13], [18, 19], [20, 21]]
    return PlantedSpec(n_samples, 24, dups, blocks, noise=0.0)


def recovery_truth() -> tuple[set[tuple[int, int]], list[list[int]]]:
    spec = recovery_spec()
    pairs = {tuple(g) for g in spec.duplicate_groups}
    return pairs, [sorted(b.members) for b in spec.blocks]


# block layout of the detection task
DET_BLOCK_SIZE = 4
DET_BLOCKS = 125
DET_MALICIOUS = 47
DET_BENIGN = 43
DET_MALICIOUS_BLOCK = Block([], activation=(0.18, 0.35), member_prob=0.6)
DET_BENIGN_BLOCK = Block([], activation=(0.13, 0.11), member_prob=(0.68, 0.06))
DET_NEUTRAL_BLOCK = Block([], activation=0.2, member_prob=0.5)


def detection_spec(n_samples: int = 10_000, layout_seed: int = 7) -> tuple[PlantedSpec, list[str]]:
    """Planted layout of the detection task plus each block's kind ('m', 'b' or 'n')."""
    kinds = ["m"] * DET_MALICIOUS + ["b"] * DET_BENIGN + ["n"] * (DET_BLOCKS - DET_MALICIOUS - DET_BENIGN)
    np.random.default_rng(layout_seed).shuffle(kinds)
    proto = {"m": DET_MALICIOUS_BLOCK, "b": DET_BENIGN_BLOCK, "n": DET_NEUTRAL_BLOCK}
    blocks, dups = [], []
    for k, kind in enumerate(kinds):
        members = list(range(k * DET_BLOCK_SIZE, (k + 1) * DET_BLOCK_SIZE))
        dups.append(members[:2])
        blocks.append(Block(members, proto[kind].activation, proto[kind].member_prob, members[:2]))
    spec = PlantedSpec(n_samples, DET_BLOCKS * DET_BLOCK_SIZE, dups, blocks, malware_fraction=0.5)
    return spec, kinds


def detection_task(seed: int = 0, n_samples: int = 10_000) -> SparseBinaryDataset:
    spec, _ = detection_spec(n_samples)
    return synth_planted(spec, seed)


def make(preset: str, seed: int = 0, n_samples: int | None = None) -> SparseBinaryDataset:
    if preset == "recovery":
        return synth_planted(recovery_spec(n_samples or 20_000), seed)
    if preset == "detection":
        return detection_task(seed, n_samples or 10_000)
    raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")


def split(ds: SparseBinaryDataset, train_fraction: float = 0.7, seed: int = 1):
    """Seeded random train/test split."""
    idx = np.random.default_rng(seed).permutation(ds.n_samples)
    cut = int(round(train_fraction * ds.n_samples))
    return ds.subset(np.sort(idx[:cut])), ds.subset(np.sort(idx[cut:]))
