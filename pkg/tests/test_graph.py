import numpy as np
import pytest
from hypothesis import given, strategies as st

from coupledopt.errors import (DisconnectedGraph, DuplicateEdge, IndexOutOfRange, InvalidShrink,
                               NonPositiveDiagonal, SelfLoopInEdgeList)
from coupledopt.graph import (WeightPair, build_graph, build_weight_matrices, metropolis_weights,
                              random_geometric_graph, read_edge_list, ring_graph,
                              validate_assumption2, write_edge_list)

from conftest import random_connected_edges


def test_two_nodes_neighbor_sets():
    g = build_graph(2, [(1, 2)])
    assert g.neighbors == ((0, 1), (0, 1))


def test_isolated_node_rejected():
    with pytest.raises(DisconnectedGraph):
        build_graph(3, [(1, 2)])


@pytest.mark.parametrize("edges,err", [
    ([(1, 1)], SelfLoopInEdgeList),
    ([(1, 4)], IndexOutOfRange),
    ([(0, 1)], IndexOutOfRange),
    ([(1, 2), (2, 1)], DuplicateEdge),
])
def test_bad_edge_lists(edges, err):
    with pytest.raises(err):
        build_graph(3, edges)


def test_fifty_node_geometric_graph():
    g = random_geometric_graph(50, seed=7)
    assert g.n == 50
    assert 3.0 <= g.degrees.mean() <= 8.0
    assert g == random_geometric_graph(50, seed=7)


def test_single_node():
    g = build_graph(1, [])
    assert g.neighbors == ((0,),)
    wp = build_weight_matrices(g)
    assert wp.PW[0, 0] == 1.0 and wp.PH[0, 0] == 0.0


def test_edge_list_roundtrip(tmp_path):
    g = random_geometric_graph(12, seed=1)
    path = tmp_path / "g.txt"
    write_edge_list(g, path)
    assert read_edge_list(path) == g


def test_two_node_weights():
    wp = build_weight_matrices(build_graph(2, [(1, 2)]))
    np.testing.assert_allclose(wp.PW, [[0.75, 0.25], [0.25, 0.75]], atol=1e-15)
    np.testing.assert_allclose(wp.PH, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)


def test_ring5_PH_spectrum():
    # Metropolis on a ring puts 1/3 everywhere, so eig(P') = (1 + 2 cos(2 pi k / 5)) / 3
    # and eig(PH) = (1 - cos(2 pi k / 5)) / 3
    wp = build_weight_matrices(ring_graph(5))
    ev = np.sort(np.linalg.eigvalsh(wp.PH))
    expect = np.sort((1 - np.cos(2 * np.pi * np.arange(5) / 5)) / 3)
    np.testing.assert_allclose(ev, expect, atol=1e-14)
    assert abs(ev[0]) < 1e-14 and ev[1] > 0


def test_two_node_report():
    g = build_graph(2, [(1, 2)])
    rep = validate_assumption2(build_weight_matrices(g), g)
    assert rep.clauses["a"] and rep.clauses["b"] and rep.clauses["c"]
    assert rep.clauses["d_relaxed"] and rep.passed
    # PW + PH = I here, so the strict form is reported impossible
    assert not rep.clauses["d_strict"]
    # eigenvalues of PW+PH: both 1, and of PH: 0 on span(1), 1/2 on (1,-1)
    np.testing.assert_allclose(np.linalg.eigvalsh(build_weight_matrices(g).PH), [0, 0.5],
                               atol=1e-15)


def test_zero_PH_fails_c():
    g = ring_graph(4)
    wp = build_weight_matrices(g)
    rep = validate_assumption2(WeightPair(wp.PW, np.zeros((4, 4))), g)
    assert not rep.clauses["c"] and not rep.passed


def test_asymmetric_PW_fails_b():
    g = ring_graph(4)
    wp = build_weight_matrices(g)
    PW = wp.PW.copy()
    PW[0, 1] += 0.05
    PW[0, 0] -= 0.05
    rep = validate_assumption2(WeightPair(PW, wp.PH), g)
    assert not rep.clauses["b"]


def test_shrink_validation():
    g = ring_graph(4)
    with pytest.raises(InvalidShrink):
        build_weight_matrices(g, shrink=0.0)
    with pytest.raises(InvalidShrink):
        build_weight_matrices(g, shrink=1.5)
    wp = build_weight_matrices(g, shrink=0.5)
    assert validate_assumption2(wp, g).clauses["d_off_consensus"]


def test_nonpositive_diagonal():
    g = build_graph(2, [(1, 2)])
    with pytest.raises(NonPositiveDiagonal):
        build_weight_matrices(g, mixing=np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_indefinite_mixing_still_psd_pair():
    # P' has eigenvalue -0.8, yet (I+P')/2 and (I-P')/2 stay PSD for any
    # symmetric stochastic P'
    g = build_graph(2, [(1, 2)])
    P = np.array([[0.1, 0.9], [0.9, 0.1]])
    wp = build_weight_matrices(g, mixing=P)
    assert validate_assumption2(wp, g).passed


@given(n=st.integers(2, 25), extra=st.integers(0, 30), seed=st.integers(0, 2**31),
       shrink=st.floats(0.05, 1.0))
def test_weight_properties(n, extra, seed, shrink):
    g = build_graph(n, random_connected_edges(n, extra, np.random.default_rng(seed)))
    wp = build_weight_matrices(g, shrink=shrink)
    one = np.ones(n)
    assert np.linalg.norm(wp.PW @ one - one) <= 1e-12
    assert np.linalg.norm(wp.PH @ one) <= 1e-12
    assert np.linalg.eigvalsh(wp.PW)[0] >= -1e-10
    ev = np.linalg.eigvalsh(wp.PH)
    assert ev[0] >= -1e-10 and ev[1] > 1e-12
    mask = g.adjacency() + np.eye(n) == 0
    assert not np.any(wp.PW[mask]) and not np.any(wp.PH[mask])
    assert validate_assumption2(wp, g).passed


@given(n=st.integers(1, 20), seed=st.integers(0, 2**31))
def test_neighbor_set_symmetry(n, seed):
    g = build_graph(n, random_connected_edges(n, n // 2, np.random.default_rng(seed)))
    for i in range(n):
        assert i in g.neighbors[i]
        for j in g.neighbors[i]:
            assert i in g.neighbors[j]
    P = metropolis_weights(g)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-14)
