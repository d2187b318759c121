from __future__ import annotations

import math
from pathlib import Path

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metcross.covariates import (STATIC_SLOTS, CityInputs, MetroGraph, assemble_static_vector,
                                 build_static_matrix, distance_to_center, network_indicators, poi_entropy,
                                 shortest_path_lengths, station_indicators)
from metcross.data import StationSet
from metcross.errors import DataError

from graph_oracle import indicators

PAIRS8 = [(i, j) for i in range(8) for j in range(i + 1, 8)]


def metro(n, edges, lengths=None):
    ids = tuple(f"v{i}" for i in range(n))
    return MetroGraph(StationSet("g", ids), tuple((f"v{a}", f"v{b}") for a, b in edges), lengths)


def connected_graphs():
    """Every connected graph on 2..8 vertices up to isomorphism."""
    for g in nx.graph_atlas_g():
        if 2 <= g.number_of_nodes() <= 7 and nx.is_connected(g):
            yield g.number_of_nodes(), list(g.edges())
    for line in (Path(__file__).parent / "data" / "connected8.txt").read_text().split():
        mask = int(line)
        yield 8, [p for k, p in enumerate(PAIRS8) if mask >> k & 1]


def test_graph_catalogue_is_complete():
    counts = {}
    for n, _ in connected_graphs():
        counts[n] = counts.get(n, 0) + 1
    # connected unlabeled graphs on n vertices
    assert counts == {2: 1, 3: 2, 4: 6, 5: 21, 6: 112, 7: 853, 8: 11117}


def check_against_oracle(n, edges, tol=1e-12):
    g = metro(n, edges)
    adj = np.zeros((n, n))
    for a, b in edges:
        adj[a, b] = adj[b, a] = 1
    ref = indicators(adj)
    eff, avg, dens = network_indicators(g)
    deg, clo, btw = station_indicators(g)
    assert abs(eff - ref["efficiency"]) <= tol
    assert abs(avg - ref["avg_distance"]) <= tol
    assert abs(dens - ref["density"]) <= tol
    np.testing.assert_array_equal(deg, ref["degree"])
    np.testing.assert_allclose(clo, ref["closeness"], rtol=0, atol=tol)
    np.testing.assert_allclose(btw, ref["betweenness"], rtol=0, atol=tol)


def test_indicators_match_oracle_on_all_small_graphs():
    count = 0
    for n, edges in connected_graphs():
        check_against_oracle(n, edges)
        count += 1
    assert count == 1 + 2 + 6 + 21 + 112 + 853 + 11117


def test_hand_examples():
    k3 = metro(3, [(0, 1), (1, 2), (0, 2)])
    assert network_indicators(k3) == (1.0, 1.0, 1.0)
    deg, clo, btw = station_indicators(k3)
    assert list(deg) == [2, 2, 2] and list(clo) == [1, 1, 1] and list(btw) == [0, 0, 0]

    path = metro(3, [(0, 1), (1, 2)])
    eff, avg, dens = network_indicators(path)
    assert dens == pytest.approx(2 / 3) and avg == pytest.approx(4 / 3) and eff == pytest.approx(5 / 6)
    deg, clo, btw = station_indicators(path)
    assert (deg[1], clo[1], btw[1]) == (2, 1, 1)

    star = metro(4, [(0, 1), (0, 2), (0, 3)])
    assert station_indicators(star)[2][0] == pytest.approx(1.0)


@pytest.mark.parametrize("n", range(2, 9))
def test_line_density(n):
    g = metro(n, [(i, i + 1) for i in range(n - 1)])
    assert network_indicators(g)[2] == pytest.approx(2 / n)


def test_disconnected_graph_names_components():
    g = metro(4, [(0, 1), (2, 3)])
    with pytest.raises(DataError, match="v2"):
        network_indicators(g)
    with pytest.raises(DataError):
        station_indicators(g)


def test_graph_validation():
    with pytest.raises(DataError):
        metro(2, [(0, 0)])
    with pytest.raises(DataError):
        metro(2, [(0, 1), (1, 0)])
    with pytest.raises(DataError):
        MetroGraph(StationSet("g", ("a",)), (("a", "zz"),))


def test_weighted_paths_agree_with_networkx():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(4, 10))
        gx = nx.connected_watts_strogatz_graph(n, 2, 0.5, seed=int(rng.integers(1 << 30)))
        edges = list(gx.edges())
        lengths = tuple(float(x) for x in rng.integers(1, 4, len(edges)))
        for (a, b), w in zip(edges, lengths):
            gx[a][b]["w"] = w
        g = metro(n, edges, lengths)
        ref = dict(nx.all_pairs_dijkstra_path_length(gx, weight="w"))
        np.testing.assert_allclose(shortest_path_lengths(g), [[ref[i][j] for j in range(n)] for i in range(n)])
        btw = nx.betweenness_centrality(gx, weight="w", normalized=True)
        np.testing.assert_allclose(station_indicators(g)[2], [btw[i] for i in range(n)], atol=1e-12)


def test_entropy_examples():
    assert poi_entropy([10, 10]) == pytest.approx(math.log(2), abs=1e-12)
    assert poi_entropy([1, 0, 0]) == 0
    assert poi_entropy([3, 1]) == pytest.approx(0.562335, abs=1e-6)
    with pytest.raises(DataError):
        poi_entropy([0, 0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=12).filter(lambda c: sum(c) > 0))
def test_entropy_matches_formula_and_bound(counts):
    total = sum(counts)
    ref = -sum(c / total * math.log(c / total) for c in counts if c)
    h = poi_entropy(counts)
    assert abs(h - ref) <= 1e-12
    k = len(counts)
    assert h <= math.log(k) + 1e-12
    uniform = len(set(counts)) == 1
    assert (abs(h - math.log(k)) <= 1e-12) == uniform or k == 1


def test_distance_to_center():
    assert distance_to_center(10.0, 20.0, 10.0, 20.0) == 0
    assert distance_to_center(0.0, 1.0, 0.0, 0.0) == pytest.approx(111.195, abs=1e-3)
    assert distance_to_center(0.0, 0.0, 0.0, 180.0) == pytest.approx(math.pi * 6371.0, rel=1e-12)
    with pytest.raises(DataError):
        distance_to_center(91.0, 0.0, 0.0, 0.0)


def _inputs(reserved=None):
    g = metro(5, [(0, 1), (1, 2), (2, 3), (1, 4)])
    rng = np.random.default_rng(0)
    return CityInputs(g, rng.integers(1, 9, (5, 4)).astype(float), rng.uniform(30, 31, 5),
                      rng.uniform(120, 121, 5), rng.random(5), rng.integers(0, 5, 5).astype(float),
                      (30.5, 120.5), {"population": 10.0, "gdp_per_capita": 2.0, "population_density": 3.0,
                                      "bus_network_density": 4.0}, reserved or {})


def test_static_matrix_layout():
    inp = _inputs()
    m = build_static_matrix(inp)
    assert m.shape == (5, 18) and len(STATIC_SLOTS) == 18
    col = {s: m[:, i] for i, s in enumerate(STATIC_SLOTS)}
    assert list(col["is_transfer"]) == [0, 1, 0, 0, 0]
    assert list(col["is_terminal"]) == [1, 0, 0, 1, 1]
    for s in ("population", "gdp_per_capita", "network_efficiency", "avg_shortest_path", "network_density"):
        assert np.var(col[s]) == 0
    assert np.all(col["reserved_1"] == 0) and np.all(col["reserved_2"] == 0)
    np.testing.assert_array_equal(build_static_matrix(_inputs()), m)
    assert np.all(build_static_matrix(_inputs({"reserved_1": 7.0}))[:, STATIC_SLOTS.index("reserved_1")] == 7)


def test_missing_slot_is_named():
    inp = _inputs()
    inp.scalars = {"population": 1.0}
    with pytest.raises(DataError, match="gdp_per_capita"):
        build_static_matrix(inp)
    with pytest.raises(DataError, match="x"):
        assemble_static_vector({}, 3, ("x",))


def test_graph_csv_round_trip(tmp_path):
    g = metro(3, [(0, 1), (1, 2)], (1.5, 2.0))
    g.to_csv(tmp_path / "t.csv")
    h = MetroGraph.from_csv(tmp_path / "t.csv", g.stations)
    np.testing.assert_array_equal(shortest_path_lengths(h), shortest_path_lengths(g))
