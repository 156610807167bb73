"""Built-in problem families and their JSON serialization.

linear-log
    minimize sum_i c_i x_i  s.t.  sum_i -d_i log(1 + x_i) <= -b,  x_i in [0, 1].
    No variable coupling; the offset -b is split evenly as +b/n per node.
coupled-quadratic
    minimize sum_i x_N' P_i x_N + Q_i' x_N
    s.t.     sum_i x_N' A_il x_N + a_il' x_N <= sum_i r_il,   l = 1..p,
             sum_i E_i x_N = sum_i e_i,   l_i <= x_i <= u_i,
    with x_N the stacked variables of the closed neighborhood of node i.
"""
from __future__ import annotations

import json

import numpy as np

from . import _kernels
from .errors import ConfigError, Infeasible
from .graph import build_graph, random_geometric_graph
from .problem import CoupledProblem, LipschitzEstimates, NodeEvals, NodeProblem

FORMAT = "coupledopt-problem"
FORMAT_VERSION = 1


def default_graph(n, seed):
    """The seed-pinned connected geometric topology used by the experiments."""
    return random_geometric_graph(n, avg_degree=4.0, seed=seed)


# ---------------------------------------------------------------- linear-log

class _LinearLogBatch:
    def __init__(self, c, d, offset):
        self.c, self.d, self.offset = c, d, offset

    def evaluate(self, x, derivatives=True):
        f = self.c * x
        g = (-self.d * np.log1p(x) + self.offset)[:, None]
        if not derivatives:
            return NodeEvals(f, g, None)
        dg = -self.d / (1.0 + x)

        def scatter(wf, wg):
            out = np.zeros_like(x)
            if wf is not None:
                out += wf * self.c
            if wg is not None:
                out += wg[:, 0] * dg
            return out
        return NodeEvals(f, g, scatter)

    def values_many(self, X):
        """Objective and summed constraint at many points X (K, n)."""
        F = X @ self.c
        H = (-np.log1p(X) @ self.d + self.offset * len(self.c))[:, None]
        return F, H, np.zeros((len(X), 1))


def _linear_log_node(c, d, offset):
    return NodeProblem(
        dim=1, lower=[0.0], upper=[1.0],
        f=lambda x: c * x[0],
        grad_f=lambda x: np.array([c]),
        g=lambda x: np.array([-d * np.log1p(x[0]) + offset]),
        jac_g=lambda x: np.array([[-d / (1.0 + x[0])]]),
        A=np.zeros((1, 1)), b=np.zeros(1))


def gen_linear_log(n, seed=0, b=None, graph=None, c=None, d=None, max_tries=100):
    """Random instance of the linear-log family.

    c_i, d_i ~ U[0, 1] unless given. ``b`` defaults to n/10 (b = 5 at n = 50).
    Draws are repeated until x = 1 is a Slater point.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    b = 0.1 * n if b is None else float(b)
    rng = np.random.default_rng(seed)
    graph = graph if graph is not None else default_graph(n, seed)
    fixed = c is not None and d is not None
    for attempt in range(1 if fixed else max_tries):
        cc = np.asarray(c, float) if c is not None else rng.random(n)
        dd = np.asarray(d, float) if d is not None else rng.random(n)
        if np.all(dd == 0) and b > 0:
            raise Infeasible("all d_i are zero but b > 0: constraint cannot hold")
        if dd.sum() * np.log(2.0) > b:
            break
    else:
        raise Infeasible(f"no Slater point at x = 1 (sum d_i log 2 = "
                         f"{dd.sum() * np.log(2.0):.4g} <= b = {b})")
    offset = b / n
    nodes = [_linear_log_node(float(cc[i]), float(dd[i]), offset) for i in range(n)]
    for i, nd in enumerate(nodes):
        nd.scope = (i,)
    lip = LipschitzEstimates(L_f=0.0, L_g=float(dd.max()), beta=float(max(dd.max(), 1e-12)),
                             max_nbhd=max(len(nb) for nb in graph.neighbors))
    return CoupledProblem(
        graph=graph, nodes=nodes, p=1, m=1, batch=_LinearLogBatch(cc, dd, offset),
        slater_point=np.ones(n), lipschitz_hint=lip, family="linear-log",
        meta={"seed": seed, "b": b, "c": cc.tolist(), "d": dd.tolist(),
              "equality": "inactive zero block (m=1, A=0, b=0)"})


# ---------------------------------------------------------------- coupled quadratic

class _QuadraticBatch:
    def __init__(self, obj, cons, rhs, gather, gptr, nx, data=None):
        self.obj, self.cons, self.rhs = obj, cons, rhs      # rhs: (n, p)
        self.gather, self.gptr, self.nx = gather, gptr, nx
        self.sizes = np.diff(gptr)
        self.data = data

    def evaluate(self, x, derivatives=True):
        xg = x[self.gather]
        f, gf = self.obj.evaluate(xg)
        parts = [c.evaluate(xg) for c in self.cons]
        g = np.stack([v for v, _ in parts], axis=1) - self.rhs
        if not derivatives:
            return NodeEvals(f, g, None)

        def scatter(wf, wg):
            w = np.zeros(len(xg))
            if wf is not None:
                w += np.repeat(wf, self.sizes) * gf
            if wg is not None:
                for l, (_, gl) in enumerate(parts):
                    w += np.repeat(wg[:, l], self.sizes) * gl
            return _kernels.scatter_add(self.gather, w, self.nx)
        return NodeEvals(f, g, scatter)


def _quadratic_node(dim, lower, upper, P, Q, A, a, r, E, e):
    # A: (p, D, D), a: (p, D), r: (p,)
    return NodeProblem(
        dim=dim, lower=lower, upper=upper,
        f=lambda x: float(x @ P @ x + Q @ x),
        grad_f=lambda x: 2.0 * P @ x + Q,
        g=lambda x: np.einsum("i,lij,j->l", x, A, x) + a @ x - r,
        jac_g=lambda x: 2.0 * np.einsum("lij,j->li", A, x) + a,
        A=E, b=e)


def _gather_for(graph, d):
    gather = np.concatenate([np.concatenate([np.arange(j * d, (j + 1) * d) for j in nb])
                             for nb in graph.neighbors]).astype(np.int64)
    sizes = np.array([d * len(nb) for nb in graph.neighbors])
    return gather, np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def _normalize_node(dt, d, m):
    """Coerce one node's coefficients to the (p, D, D) / (p, D) / (p,) layout."""
    out = {k: np.asarray(v, float) for k, v in dt.items() if k not in ("id", "dim")}
    D = len(out["Q"])
    out["A"] = out["A"].reshape(-1, D, D)
    out["a"] = out["a"].reshape(-1, D)
    out["r"] = np.atleast_1d(out["r"]).reshape(-1)
    out["E"] = out["E"].reshape(m, D)
    out["e"] = out["e"].reshape(m)
    return out


def quadratic_problem(graph, d, m, data, meta=None):
    """Assemble a coupled-quadratic CoupledProblem from per-node coefficient dicts."""
    n = graph.n
    data = [_normalize_node(dt, d, m) for dt in data]
    p = data[0]["A"].shape[0]
    if any(dt["A"].shape[0] != p for dt in data):
        raise ConfigError("every node needs the same number of constraints")
    nodes = [_quadratic_node(d, dt["lower"], dt["upper"], dt["P"], dt["Q"], dt["A"], dt["a"],
                             dt["r"], dt["E"], dt["e"]) for dt in data]
    gather, gptr = _gather_for(graph, d)
    obj = _kernels.QuadBlocks([dt["P"] for dt in data], [dt["Q"] for dt in data])
    cons = [_kernels.QuadBlocks([dt["A"][l] for dt in data], [dt["a"][l] for dt in data])
            for l in range(p)]
    rhs = np.array([dt["r"] for dt in data]).reshape(n, p)
    batch = _QuadraticBatch(obj, cons, rhs, gather, gptr, n * d, data=data)

    # analytic constants over the boxes
    max_nb = max(len(nb) for nb in graph.neighbors)
    L_f = max(2 * np.linalg.norm(dt["P"], 2) for dt in data)
    L_g = max(2 * np.linalg.norm(dt["A"][l], 2) for dt in data for l in range(p))
    box_norm = np.array([max(np.abs(dt["lower"]).max(), np.abs(dt["upper"]).max()) for dt in data])
    beta = 0.0
    for i, dt in enumerate(data):
        rad = np.sqrt(d * sum(box_norm[j] ** 2 for j in graph.neighbors[i]))
        # spectral norm of the p x D Jacobian, bounded through its Frobenius norm
        rows = [2 * np.linalg.norm(dt["A"][l], 2) * rad + np.linalg.norm(dt["a"][l])
                for l in range(p)]
        beta = max(beta, float(np.sqrt(np.sum(np.square(rows)))))
    lip = LipschitzEstimates(L_f=float(L_f), L_g=float(L_g), beta=float(max(beta, 1e-12)),
                             max_nbhd=max_nb)
    slater = None
    if meta and "interior_point" in meta:
        slater = np.asarray(meta["interior_point"], float)
    return CoupledProblem(graph=graph, nodes=nodes, p=p, m=m, batch=batch,
                          slater_point=slater, lipschitz_hint=lip,
                          family="coupled-quadratic", meta=dict(meta or {}))


def gen_coupled_quadratic(n, d=2, m=2, seed=0, graph=None, slack=0.2, zero_quadratic=False,
                          p=1, normalize_eq=True):
    """Random coupled-quadratic instance with a Slater point by construction.

    Per node (D = d |N_i|): P_i = G'G / D and A_il = 0.5 H'H / D with standard
    normal G, H; Q_i standard normal; a_il = -Q_i + 0.5 * noise, so the
    objective pushes against the inequality and it tends to bind; E_i standard
    normal (``normalize_eq`` rescales it so max_i |Abar_i| = 1); bounds
    l ~ U[-1.5, -0.5], u ~ U[0.5, 1.5]. A random
    interior point xt fixes e_i = E_i xt_N (equality holds exactly) and
    r_il = g_il(xt_N) + slack (inequality strict).
    """
    if min(n, d, m, p) < 1:
        raise ConfigError("n, d, m and p must be >= 1")
    rng = np.random.default_rng(seed)
    graph = graph if graph is not None else default_graph(n, seed)
    lower = rng.uniform(-1.5, -0.5, size=(n, d))
    upper = rng.uniform(0.5, 1.5, size=(n, d))
    xt = lower + (upper - lower) * rng.uniform(0.25, 0.75, size=(n, d))
    data = []
    for i in range(n):
        nb = graph.neighbors[i]
        D = d * len(nb)
        Gm = rng.standard_normal((D, D))
        P = np.zeros((D, D)) if zero_quadratic else Gm.T @ Gm / D
        A = np.zeros((p, D, D))
        if not zero_quadratic:
            for l in range(p):
                Hm = rng.standard_normal((D, D))
                A[l] = 0.5 * Hm.T @ Hm / D
        Q = rng.standard_normal(D)
        a = -Q + 0.5 * rng.standard_normal((p, D))
        E = rng.standard_normal((m, D))
        xn = np.concatenate([xt[j] for j in nb])
        r = np.einsum("i,lij,j->l", xn, A, xn) + a @ xn + slack
        data.append({"lower": lower[i], "upper": upper[i], "P": P, "Q": Q, "A": A, "a": a,
                     "r": r, "E": E, "xn": xn})
    # optional rescale to max_i |Abar_i| = 1, the scale of the slack block of B
    Abar = [np.zeros((m, d)) for _ in range(n)]
    for i, dt in enumerate(data):
        for pos, j in enumerate(graph.neighbors[i]):
            Abar[j] += dt["E"][:, pos * d:(pos + 1) * d]
    scale = max(np.linalg.norm(Ab, 2) for Ab in Abar) if normalize_eq else 1.0
    for dt in data:
        dt["E"] = dt["E"] / scale
        dt["e"] = dt["E"] @ dt.pop("xn")
    meta = {"seed": seed, "d": d, "m": m, "p": p, "slack": slack, "normalize_eq": normalize_eq,
            "interior_point": xt.ravel().tolist(),
            "distributions": "P=G'G/D, A=0.5H'H/D, G,H,Q ~ N(0,1), a=-Q+0.5N(0,1), "
                             "E ~ N(0,1), l~U[-1.5,-0.5], u~U[0.5,1.5]"}
    return quadratic_problem(graph, d, m, data, meta)


# ---------------------------------------------------------------- JSON

def problem_to_dict(problem):
    g = problem.graph
    doc = {"format": FORMAT, "version": FORMAT_VERSION, "family": problem.family,
           "graph": {"n": g.n, "edges": g.edge_list_1based()},
           "p": problem.p, "m": problem.m, "meta": _jsonable(problem.meta)}
    if problem.family == "linear-log":
        doc["b"] = problem.meta["b"]
        doc["nodes"] = [{"id": i + 1, "dim": 1, "lower": [0.0], "upper": [1.0],
                         "c": problem.meta["c"][i], "d": problem.meta["d"][i]}
                        for i in range(g.n)]
    elif problem.family == "coupled-quadratic":
        doc["d"] = int(problem.nodes[0].dim)
        doc["nodes"] = [{"id": i + 1, "dim": problem.nodes[i].dim,
                         **{k: _jsonable(v) for k, v in dt.items()}}
                        for i, dt in enumerate(problem.batch.data)]
    else:
        raise ConfigError("only built-in families can be serialized; callback "
                          "problems are code-level only")
    return doc


def problem_from_dict(doc):
    if doc.get("format") != FORMAT:
        raise ConfigError(f"not a {FORMAT} document")
    g = build_graph(doc["graph"]["n"], doc["graph"]["edges"])
    fam = doc.get("family")
    meta = doc.get("meta", {})
    if fam == "linear-log":
        nodes = sorted(doc["nodes"], key=lambda nd: nd["id"])
        return gen_linear_log(g.n, seed=meta.get("seed", 0), b=doc["b"], graph=g,
                              c=[nd["c"] for nd in nodes], d=[nd["d"] for nd in nodes])
    if fam == "coupled-quadratic":
        nodes = sorted(doc["nodes"], key=lambda nd: nd["id"])
        return quadratic_problem(g, int(doc["d"]), int(doc["m"]), nodes, meta)
    raise ConfigError(f"unknown family {fam!r}")


def save_problem(problem, path):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(problem), fh, indent=1)


def load_problem(path):
    with open(path) as fh:
        return problem_from_dict(json.load(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
