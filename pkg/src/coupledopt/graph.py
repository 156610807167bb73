"""Undirected graphs, closed neighbor sets and mixing-matrix pairs.

Node ids are 0-based inside the package. Edge lists given by users (and the
edge-list text format) are 1-based.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (DisconnectedGraph, DuplicateEdge, IndexOutOfRange,
                     InvalidShrink, NonPositiveDiagonal, SelfLoopInEdgeList)

EIG_TOL = 1e-10


@dataclass(frozen=True)
class Graph:
    n: int
    edges: tuple            # sorted 0-based pairs (i, j) with i < j
    neighbors: tuple        # neighbors[i] = sorted closed neighborhood N_i

    @property
    def degrees(self):
        return np.array([len(nb) - 1 for nb in self.neighbors])

    def adjacency(self):
        A = np.zeros((self.n, self.n))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    def is_neighbor(self, i, j):
        return j in self.neighbors[i]

    def edge_list_1based(self):
        return [[i + 1, j + 1] for i, j in self.edges]


def _connected(n, adj):
    seen = {0}
    todo = deque([0])
    while todo:
        i = todo.popleft()
        for j in adj[i]:
            if j not in seen:
                seen.add(j)
                todo.append(j)
    return len(seen) == n


def build_graph(n, edges, base=1):
    """Build a connected undirected graph from an edge list.

    Parameters
    ----------
    n : int
        Number of nodes.
    edges : iterable of pairs
        Node pairs, ``base``-indexed (1-based by default).
    base : int
        Index of the first node in ``edges``.

    Returns
    -------
    Graph
    """
    n = int(n)
    if n < 1:
        raise IndexOutOfRange(f"node count must be >= 1, got {n}")
    seen = set()
    adj = [set() for _ in range(n)]
    for pair in edges:
        i, j = (int(v) - base for v in pair)
        for v in (i, j):
            if not 0 <= v < n:
                raise IndexOutOfRange(f"node {v + base} outside 1..{n}" if base == 1
                                      else f"node {v + base} outside range")
        if i == j:
            raise SelfLoopInEdgeList(f"self loop at node {i + base}")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise DuplicateEdge(f"edge {{{i + base}, {j + base}}} listed twice")
        seen.add(key)
        adj[i].add(j)
        adj[j].add(i)
    if not _connected(n, adj):
        raise DisconnectedGraph(f"graph on {n} nodes is not connected")
    neighbors = tuple(tuple(sorted(adj[i] | {i})) for i in range(n))
    return Graph(n=n, edges=tuple(sorted(seen)), neighbors=neighbors)


def read_edge_list(path):
    """Parse the edge-list text format: first line ``n``, then ``i j`` per line."""
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise IndexOutOfRange(f"{path}: empty edge list")
    n = int(lines[0])
    edges = [tuple(int(tok) for tok in ln.split()[:2]) for ln in lines[1:]]
    return build_graph(n, edges)


def write_edge_list(graph, path):
    with open(path, "w") as fh:
        fh.write(f"{graph.n}\n")
        for i, j in graph.edge_list_1based():
            fh.write(f"{i} {j}\n")


def path_graph(n):
    return build_graph(n, [(i, i + 1) for i in range(1, n)])


def ring_graph(n):
    if n < 3:
        return path_graph(n)
    return build_graph(n, [(i, i % n + 1) for i in range(1, n + 1)])


def random_geometric_graph(n, avg_degree=4.0, seed=0):
    """Connected random geometric graph on the unit square.

    The radius is set from the target average degree and grown by 5% until
    the graph is connected. Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    if n == 1:
        return build_graph(1, [])
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    radius = np.sqrt(avg_degree / (np.pi * max(n - 1, 1)))
    while True:
        iu, ju = np.nonzero(np.triu(dist <= radius, k=1))
        edges = [(i + 1, j + 1) for i, j in zip(iu, ju)]
        try:
            return build_graph(n, edges)
        except DisconnectedGraph:
            radius *= 1.05


# ---------------------------------------------------------------- mixing

@dataclass(frozen=True)
class WeightPair:
    PW: np.ndarray
    PH: np.ndarray
    shrink: float = 1.0
    lazified: bool = False

    @property
    def n(self):
        return self.PW.shape[0]

    def apply_W(self, U):
        """(P^W kron I) u for u stored as an (n, m+p) array of node blocks."""
        return self.PW @ U

    def apply_H(self, U):
        return self.PH @ U


def metropolis_weights(graph):
    """Symmetric doubly stochastic P' with 1/(1+max(deg_i, deg_j)) on edges."""
    deg = graph.degrees
    P = np.zeros((graph.n, graph.n))
    for i, j in graph.edges:
        P[i, j] = P[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return P


def build_weight_matrices(graph, shrink=1.0, mixing=None):
    """P^W = (I+P')/2 and P^H = shrink*(I-P')/2 from a graph-compatible P'.

    ``mixing`` overrides the default Metropolis P'. If either result fails the
    PSD check, P' is replaced by its lazy version (I+P')/2 and rebuilt.
    """
    if not (0.0 < shrink <= 1.0):
        raise InvalidShrink(f"shrink must lie in (0, 1], got {shrink}")
    P = metropolis_weights(graph) if mixing is None else np.asarray(mixing, float)
    if P.shape != (graph.n, graph.n):
        raise NonPositiveDiagonal(f"mixing matrix has shape {P.shape}")
    if np.any(np.diag(P) <= 0):
        bad = int(np.argmin(np.diag(P)))
        raise NonPositiveDiagonal(f"P' diagonal entry at node {bad + 1} is {P[bad, bad]:.3g}")
    I = np.eye(graph.n)
    lazified = False
    for _ in range(2):
        PW = 0.5 * (I + P)
        PH = 0.5 * shrink * (I - P)
        # force exact zero row sums on P^H so z stays summing to zero
        off = PH - np.diag(np.diag(PH))
        PH = off - np.diag(off.sum(axis=1))
        if min(np.linalg.eigvalsh(PW)[0], np.linalg.eigvalsh(PH)[0]) >= -EIG_TOL:
            break
        P = 0.5 * (I + P)
        lazified = True
    return WeightPair(PW=PW, PH=PH, shrink=shrink, lazified=lazified)


@dataclass
class ValidationReport:
    clauses: dict = field(default_factory=dict)     # clause -> bool
    details: dict = field(default_factory=dict)     # clause -> message

    @property
    def passed(self):
        return all(self.clauses[c] for c in ("a", "b", "c", "d_relaxed"))

    def lines(self):
        labels = {
            "a": "(a) sparsity follows N_i",
            "b": "(b) symmetric PSD",
            "c": "(c) PW 1 = 1, Null(PH) = span(1)",
            "d_relaxed": "(d, relaxed) lambda_max(PW+PH) <= 1",
            "d_off_consensus": "(d, off-consensus) PW+PH < I on span(1)^perp",
            "d_strict": "(d, strict) PW+PH < I",
        }
        out = []
        for key, label in labels.items():
            if key in self.clauses:
                flag = "PASS" if self.clauses[key] else "FAIL"
                out.append(f"{flag}  {label}: {self.details.get(key, '')}")
        return out

    def as_dict(self):
        return {"passed": self.passed, "clauses": dict(self.clauses),
                "details": dict(self.details)}


def validate_assumption2(wp, graph, tol=EIG_TOL):
    """Check the mixing-matrix conditions clause by clause; never raises."""
    rep = ValidationReport()
    PW, PH = np.asarray(wp.PW, float), np.asarray(wp.PH, float)
    n = graph.n
    one = np.ones(n)

    mask = np.eye(n, dtype=bool)
    for i, j in graph.edges:
        mask[i, j] = mask[j, i] = True
    leak = max(np.abs(PW[~mask]).max(initial=0.0), np.abs(PH[~mask]).max(initial=0.0))
    rep.clauses["a"] = bool(leak == 0.0)
    rep.details["a"] = f"max |entry| off the neighbor pattern = {leak:.3g}"

    asym = max(np.abs(PW - PW.T).max(), np.abs(PH - PH.T).max())
    sym = asym <= tol
    lw = np.linalg.eigvalsh(0.5 * (PW + PW.T))
    lh = np.linalg.eigvalsh(0.5 * (PH + PH.T))
    rep.clauses["b"] = bool(sym and lw[0] >= -tol and lh[0] >= -tol)
    rep.details["b"] = (f"asymmetry {asym:.3g}, min eig PW {lw[0]:.3g}, "
                        f"min eig PH {lh[0]:.3g}")

    row_err = np.abs(PW @ one - one).max()
    vals, vecs = np.linalg.eigh(0.5 * (PH + PH.T))
    null = vecs[:, np.abs(vals) <= tol]
    null_ok = null.shape[1] == 1 and abs(abs(null[:, 0] @ one) / np.sqrt(n) - 1) <= 1e-8
    rep.clauses["c"] = bool(row_err <= 1e-12 and null_ok)
    rep.details["c"] = f"|PW 1 - 1|_inf = {row_err:.3g}, dim Null(PH) = {null.shape[1]}"

    S = 0.5 * (PW + PH + PW.T + PH.T)
    svals, svecs = np.linalg.eigh(S)
    rep.clauses["d_relaxed"] = bool(svals[-1] <= 1 + tol)
    rep.details["d_relaxed"] = f"lambda_max(PW+PH) = {svals[-1]:.12g}"

    top = svecs[:, svals >= 1 - tol]
    off_ok = (top.shape[1] <= 1 and svals[-1] <= 1 + tol
              and (top.shape[1] == 0 or abs(abs(top[:, 0] @ one) / np.sqrt(n) - 1) <= 1e-8))
    rep.clauses["d_off_consensus"] = bool(off_ok)
    rep.details["d_off_consensus"] = f"multiplicity of eigenvalue 1 = {top.shape[1]}"

    rep.clauses["d_strict"] = bool(svals[-1] < 1 - tol)
    rep.details["d_strict"] = ("impossible whenever (c) holds: (PW+PH) 1 = 1"
                               if rep.clauses["c"] else f"lambda_max = {svals[-1]:.6g}")
    return rep
