import io

import numpy as np
import pytest

from cfguard.correlation import PhiGraph
from cfguard.opf import NONE, build_forest, clusters, dense_groups, dump_forest, select_prototypes

from helpers import check_forest, random_graph
from oracles import bottleneck_costs, components


def test_costs_match_exhaustive_paths():
    rng = np.random.default_rng(11)
    for _ in range(150):
        n, edges, protos = random_graph(rng, p_hi=0.45)
        g = PhiGraph.from_edges(n, [(i, j, w) for (i, j), w in edges.items()])
        forest = build_forest(g, protos)
        assert forest.cost.tolist() == bottleneck_costs(n, edges, protos)
        check_forest(g, forest, protos)


def test_three_node_example():
    g = PhiGraph.from_edges(3, [(0, 1, 0.8), (1, 2, 0.6), (0, 2, 0.5)])
    forest = build_forest(g, [0])
    assert forest.cost.tolist() == [1.0, 0.8, 0.6]
    assert forest.pred[2] == 1
    assert clusters(forest) == [[0, 1, 2]]


def test_disconnected_feature_stays_unassigned():
    g = PhiGraph.from_edges(4, [(0, 1, 0.5)])
    forest = build_forest(g, [0])
    assert forest.root[3] == NONE and forest.cost[3] == 0.0
    assert clusters(forest) == [[0, 1]]


def test_tie_goes_to_the_first_offer():
    # f=2 reaches both prototypes at 0.7
    g = PhiGraph.from_edges(3, [(0, 2, 0.7), (1, 2, 0.7)])
    forest = build_forest(g, [1, 0])
    assert forest.root[2] == 0
    # prototype 1 is popped before feature 3, so its offer to 4 comes first
    g = PhiGraph.from_edges(5, [(0, 3, 0.9), (3, 4, 0.7), (1, 4, 0.7)])
    assert build_forest(g, [0, 1]).root[4] == 1


def test_no_prototypes(caplog):
    g = PhiGraph.from_edges(3, [(0, 1, 0.95)])
    forest = build_forest(g, [])
    assert clusters(forest) == []
    assert (forest.root == NONE).all()
    assert "no prototypes" in caplog.text


def test_two_components_give_two_clusters():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n, edges, _ = random_graph(rng)
        comps = [c for c in components(n, edges) if len(c) >= 2]
        protos = sorted(min(c) for c in comps)
        forest = build_forest(PhiGraph.from_edges(n, [(i, j, w) for (i, j), w in edges.items()]), protos)
        assert sorted(map(sorted, clusters(forest))) == sorted(map(sorted, comps))


def test_dense_groups_and_prototypes():
    g = PhiGraph.from_edges(8, [(0, 1, 0.95), (1, 2, 0.92), (5, 6, 0.91), (2, 5, 0.5)])
    assert dense_groups(g, 0.9) == [[0, 1, 2], [5, 6]]
    ps = select_prototypes(g, 0.9, seed=3)
    assert len(ps.prototypes) == 2
    assert ps.prototypes[0] in (0, 1, 2) and ps.prototypes[1] in (5, 6)
    assert ps.groups == [[0, 1, 2], [5, 6]]
    assert select_prototypes(g, 0.9, seed=3) == ps
    assert select_prototypes(PhiGraph.from_edges(3, [(0, 1, 0.5)]), 0.9).prototypes == ()


def test_prototype_choice_is_uniform():
    g = PhiGraph.from_edges(3, [(0, 1, 0.95), (1, 2, 0.95)])
    picks = [select_prototypes(g, 0.9, seed=s).prototypes[0] for s in range(600)]
    counts = np.bincount(picks, minlength=3)
    assert counts.min() > 150


def test_min_cost_prunes_subtrees():
    g = PhiGraph.from_edges(5, [(0, 1, 0.9), (1, 2, 0.3), (2, 3, 0.8), (0, 4, 0.6)])
    forest = build_forest(g, [0], min_cost=0.5)
    assert clusters(forest) == [[0, 1, 4]]
    assert forest.root[2] == NONE and forest.root[3] == NONE


def test_dump_forest():
    g = PhiGraph.from_edges(3, [(0, 1, 0.25)])
    fh = io.StringIO()
    dump_forest(build_forest(g, [0]), fh)
    assert fh.getvalue() == "0 0 - 1\n1 0 0 0.25\n2 - - 0\n"


def test_dense_threshold_range():
    with pytest.raises(ValueError):
        select_prototypes(PhiGraph.from_edges(2, []), 1.5)
