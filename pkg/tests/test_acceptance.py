"""End-to-end acceptance criteria. Each test prints one PASS/FAIL line.

Run alone with ``pytest -m acceptance -s``; the lines are also shown
without ``-s``.
"""

import json
import logging
import time
from pathlib import Path

import numpy as np
import pytest

from cfguard import scenario
from cfguard.attack import AttackConfig, Detector, run_campaign
from cfguard.cli import main
from cfguard.constraints import assemble, csr, repair
from cfguard.correlation import PhiGraph, bidirectional_set, build_phi_graph, contingency, phi, phi_from_counts
from cfguard.dataset import SparseBinaryDataset
from cfguard.detector import evaluate, train
from cfguard.opf import build_forest, clusters, select_prototypes
from cfguard.retrain import RetrainConfig, generate_adv_set, retrain
from cfguard.transform import apply, apply_dataset, build_map

from helpers import check_forest, random_cs_perturbation, random_graph
from oracles import bottleneck_costs, dense_phi, identical_nonconstant

pytestmark = pytest.mark.acceptance

BUDGET = 200


def report(capsys, n, ok, detail, elapsed, limit=None):
    within = limit is None or elapsed < limit
    status = "PASS" if ok and within else "FAIL"
    bound = f" / limit {limit:.0f}s" if limit is not None else ""
    with capsys.disabled():
        print(f"\n{status} criterion {n}: {detail} [{elapsed:.2f}s{bound}]")
    assert ok, detail
    assert within, f"criterion {n} took {elapsed:.1f}s, limit {limit}s"


@pytest.fixture(autouse=True)
def quiet():
    logging.disable(logging.WARNING)
    yield
    logging.disable(logging.NOTSET)


# ------------------------------------------------------------------ 1-5: oracles


def test_criterion_1_phi_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst, pred_mismatch, edge_mismatch, pairs = 0.0, 0, 0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        d = int(rng.integers(2, 17))
        X = (rng.random((n, d)) < rng.uniform(0.05, 0.95)).astype(int)
        for _ in range(int(rng.integers(0, 3))):  # plant identical columns
            i, j = rng.choice(d, 2, replace=False)
            X[:, j] = X[:, i]
        ds = SparseBinaryDataset.from_dense(X, [0] * n)
        # sparse path: co-occurrence from the sparse product, phi from counts
        M = ds.matrix(np.int64)
        co = (M.T @ M).toarray()
        cnt = np.diag(co)
        g = build_phi_graph(ds)
        perfect = bidirectional_set(g)
        for i in range(d):
            for j in range(i + 1, d):
                pairs += 1
                ref = dense_phi(X, i, j)
                got = phi_from_counts([co[i, j]], [cnt[i]], [cnt[j]], n)[0]
                if ref is None:
                    worst = max(worst, 0.0 if np.isnan(got) else np.inf)
                else:
                    worst = max(worst, abs(got - ref))
                want_edge = ref if ref is not None and ref > 0 else 0.0
                edge_mismatch += abs(g.weight(i, j) - want_edge) > 1e-12
                pred_mismatch += ((i, j) in perfect) != identical_nonconstant(X, i, j)
    ok = worst <= 1e-12 and pred_mismatch == 0 and edge_mismatch == 0
    report(capsys, 1, ok,
           f"{pairs} pairs, max |phi - oracle| = {worst:.1e}, edge mismatches {edge_mismatch}, "
           f"perfect-pair mismatches {pred_mismatch}",
           time.perf_counter() - t0, 10)


def test_criterion_2_opf_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    cost_mismatch = bellman_fail = 0
    for _ in range(500):
        n, edges, protos = random_graph(rng, max_nodes=12, max_protos=3)
        g = PhiGraph.from_edges(n, [(i, j, w) for (i, j), w in edges.items()])
        forest = build_forest(g, protos)
        cost_mismatch += forest.cost.tolist() != bottleneck_costs(n, edges, protos)
        try:
            check_forest(g, forest, protos)
        except AssertionError:
            bellman_fail += 1
    ok = cost_mismatch == 0 and bellman_fail == 0
    report(capsys, 2, ok, f"500 graphs, cost mismatches {cost_mismatch}, Bellman failures {bellman_fail}",
           time.perf_counter() - t0, 30)


def test_criterion_3_planted_recovery(capsys):
    t0 = time.perf_counter()
    ds = scenario.make("recovery")
    truth_pairs, truth_blocks = scenario.recovery_truth()
    g = build_phi_graph(ds)
    forest = build_forest(g, select_prototypes(g, 0.9, seed=0))
    found = bidirectional_set(g)
    tp = len(found & truth_pairs)
    precision = tp / len(found) if found else 0.0
    recall = tp / len(truth_pairs)
    got_blocks = sorted(sorted(c) for c in clusters(forest))
    # premise of the fixture: dense blocks, independent across blocks
    st, n = ds.stats(), ds.n_samples
    label = {f: k for k, b in enumerate(truth_blocks) for f in b}
    within, across = 1.0, 0.0
    for i in range(ds.n_features):
        for j in range(i + 1, ds.n_features):
            v = phi(contingency(st, i, j, n))
            if label.get(i, -1) == label.get(j, -2):
                within = min(within, v)
            else:
                across = max(across, abs(v))
    ok = (precision == 1.0 and recall == 1.0 and got_blocks == sorted(truth_blocks)
          and within > 0.9 and across < 0.1 and len(truth_pairs) == 5 and len(truth_blocks) == 4)
    report(capsys, 3, ok,
           f"n={n}, precision {precision:.3f}, recall {recall:.3f}, clusters == blocks: "
           f"{got_blocks == sorted(truth_blocks)} (min within-block phi {within:.3f}, max cross |phi| {across:.3f})",
           time.perf_counter() - t0, 20)


def test_criterion_4_transform_gates(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    n_clusters = proto_fail = empty_fail = mono_fail = 0
    n_add = 0
    for _ in range(1000):
        cs, _ = random_cs_perturbation(rng)
        m = build_map(cs)
        cluster_outs = {out for out, _, _ in m.clusters}
        for out, members, costs in m.clusters:
            n_clusters += 1
            proto = members[costs.index(1.0)]
            proto_fail += out not in apply(m, [proto])
        empty_fail += bool(cluster_outs & set(apply(m, [])))
        for _ in range(10):
            x = sorted(int(f) for f in np.flatnonzero(rng.random(m.n_in) < rng.uniform(0.1, 0.6)))
            j = int(rng.integers(m.n_in))
            mono_fail += not set(apply(m, x)) <= set(apply(m, sorted(set(x) | {j})))
            n_add += 1
    ok = proto_fail == 0 and empty_fail == 0 and mono_fail == 0 and n_clusters > 0 and n_add == 10_000
    report(capsys, 4, ok,
           f"{n_clusters} clusters: prototype failures {proto_fail}, empty-input activations {empty_fail}; "
           f"{n_add} single additions: monotonicity failures {mono_fail}",
           time.perf_counter() - t0, 5)


def test_criterion_5_repair_soundness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    unsound = not_idem = 0
    for _ in range(10_000):
        cs, p = random_cs_perturbation(rng)
        fixed = repair(cs, p)
        unsound += bool(fixed.added) and csr(cs, fixed) != 1.0
        not_idem += repair(cs, fixed) != fixed
    ok = unsound == 0 and not_idem == 0
    report(capsys, 5, ok, f"10000 pairs, csr != 1 after repair {unsound}, non-idempotent {not_idem}",
           time.perf_counter() - t0, 10)


# ------------------------------------------------------------------ 6-8: detection task


@pytest.fixture(scope="module")
def task():
    t0 = time.perf_counter()
    logging.disable(logging.WARNING)
    ds = scenario.detection_task(seed=0)
    tr, te = scenario.split(ds, 0.7, seed=1)
    g = build_phi_graph(tr)
    cs = assemble(g, build_forest(g, select_prototypes(g, 0.9, seed=0)))
    rmap = build_map(cs)
    m = train(tr)
    robust = train(apply_dataset(rmap, tr))
    surrogate = train(tr.subset(range(tr.n_samples // 2)), seed=5)
    mal = te.subset(np.flatnonzero(te.labels == 1))
    logging.disable(logging.NOTSET)
    return dict(tr=tr, te=te, cs=cs, rmap=rmap, m=m, robust=robust, surrogate=surrogate, mal=mal,
                setup=time.perf_counter() - t0)


def test_criterion_6_robust_representation(capsys, task):
    t0 = time.perf_counter()
    cs, mal = task["cs"], task["mal"]
    orig, rob, sur = Detector(task["m"]), Detector(task["robust"], task["rmap"]), Detector(task["surrogate"])
    U = AttackConfig(BUDGET, "unconstrained", cs)
    t_orig = run_campaign(sur, orig, mal, U)
    t_rob = run_campaign(sur, rob, mal, U)
    d_orig = run_campaign(orig, None, mal, U)
    d_rob = run_campaign(rob, None, mal, U)
    gap = t_orig.transfer_er - t_rob.transfer_er
    a_orig = d_orig.avg_added
    a_rob = d_rob.avg_added
    ratio = a_rob / a_orig if a_orig and a_rob is not None else float("nan")
    elapsed = time.perf_counter() - t0 + task["setup"]
    ok = gap >= 0.20 and ratio >= 2.0
    report(capsys, 6, ok,
           f"transfer ER original {t_orig.transfer_er:.3f} vs robust {t_rob.transfer_er:.3f} (gap {gap:.3f} >= 0.20); "
           f"direct avg added robust {a_rob:.2f} vs original {a_orig:.2f} (ratio {ratio:.2f} >= 2)",
           elapsed, 120)


def test_criterion_7_retraining(capsys, task):
    t0 = time.perf_counter()
    tr, te, cs, m, mal = task["tr"], task["te"], task["cs"], task["m"], task["mal"]
    C = AttackConfig(BUDGET, "constrained", cs)
    U = AttackConfig(BUDGET, "unconstrained", cs)
    adv_c = generate_adv_set(m, tr, RetrainConfig(0.2, 1, C, seed=3))
    adv_u = generate_adv_set(m, tr, RetrainConfig(0.2, 1, U, seed=3))
    m_c, m_u = retrain(tr, adv_c), retrain(tr, adv_u)
    # constrained examples crafted on the unretrained model, replayed against each model
    er0 = run_campaign(m, None, mal, C).er
    er_c = run_campaign(m, m_c, mal, C).transfer_er
    er_u = run_campaign(m, m_u, mal, C).transfer_er
    tpr0, tpr_c = evaluate(m, te).tpr, evaluate(m_c, te).tpr
    red_c, red_u = er0 - er_c, er0 - er_u
    elapsed = time.perf_counter() - t0 + task["setup"]
    ok = red_c >= 0.30 and tpr0 - tpr_c <= 0.02 and red_u < red_c
    report(capsys, 7, ok,
           f"constrained ER {er0:.3f} -> {er_c:.3f} (reduction {red_c:.3f} >= 0.30), "
           f"TPR {tpr0:.3f} -> {tpr_c:.3f} (drop {tpr0 - tpr_c:.3f} <= 0.02), "
           f"unconstrained-retrain reduction {red_u:.3f} < {red_c:.3f}",
           elapsed, 180)


def test_criterion_8_csr_discrimination(capsys, task):
    t0 = time.perf_counter()
    cs, m, mal = task["cs"], task["m"], task["mal"]
    con = run_campaign(m, None, mal, AttackConfig(BUDGET, "constrained", cs))
    unc = run_campaign(m, None, mal, AttackConfig(BUDGET, "unconstrained", cs))
    elapsed = time.perf_counter() - t0 + task["setup"]
    ok = con.csr_mean == 1.0 and unc.csr_mean is not None and unc.csr_mean <= 0.5
    report(capsys, 8, ok, f"mean CSR constrained {con.csr_mean} == 1.0, unconstrained {unc.csr_mean:.3f} <= 0.5",
           elapsed, 60)


# ------------------------------------------------------------------ 9: determinism


PIPELINE = [
    ["synth", "--preset", "detection", "--n-samples", "3000", "--test-fraction", "0.3",
     "--test-out", "te.txt", "--seed", "11", "--out", "tr.txt"],
    ["learn", "tr.txt", "--seed", "11", "--report", "learn.json", "--out", "cs.json"],
    ["transform", "tr.txt", "--constraints", "cs.json", "--map-out", "map.json", "--out", "tr_rob.txt"],
    ["train", "tr.txt", "--seed", "11", "--out", "m.json"],
    ["train", "tr_rob.txt", "--seed", "11", "--out", "m_rob.json"],
    ["evaluate", "te.txt", "--model", "m_rob.json", "--map", "map.json", "--out", "eval.json"],
    ["attack", "te.txt", "--model", "m.json", "--target-model", "m_rob.json", "--target-map", "map.json",
     "--constraints", "cs.json", "--adv-out", "adv.txt", "--out", "camp.json"],
    ["attack", "te.txt", "--model", "m.json", "--mode", "constrained", "--constraints", "cs.json",
     "--out", "camp_c.json"],
    ["csr", "te.txt", "--campaign", "camp.json", "--constraints", "cs.json", "--out", "csr.json"],
    ["retrain", "tr.txt", "--model", "m.json", "--test", "te.txt", "--constraints", "cs.json",
     "--k", "0.2", "--variants", "2", "--seed", "11", "--report", "retrain.json", "--adv-out", "radv.txt",
     "--out", "m_re.json"],
]


def test_criterion_9_determinism(capsys, tmp_path, monkeypatch):
    t0 = time.perf_counter()
    monkeypatch.chdir(tmp_path)
    manifests = []
    failures = []
    for argv in PIPELINE:
        code = main(argv)
        if code != 0:
            failures.append(f"{argv[0]} exited {code}")
        out = argv[argv.index("--out") + 1]
        manifests.append(tmp_path / f"{out}.manifest.json")
    n_outputs = 0
    for man in manifests:
        doc = json.loads(man.read_text())
        before = {f: Path(tmp_path, f).read_bytes() for f in doc["outputs"]}
        n_outputs += len(before)
        # remove the artifacts so the replay has to recreate them
        for f in before:
            Path(tmp_path, f).unlink()
        code = main(["replay", str(man)])
        if code != 0:
            failures.append(f"replay {man.name} exited {code}")
        for f, data in before.items():
            if Path(tmp_path, f).read_bytes() != data:
                failures.append(f"{f} differs")
    ok = not failures
    report(capsys, 9, ok,
           f"{len(PIPELINE)} commands, {n_outputs} artifacts replayed byte-identical"
           + (f"; failures: {failures}" if failures else ""),
           time.perf_counter() - t0)
