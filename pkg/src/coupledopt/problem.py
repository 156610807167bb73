"""Coupled problem data, per-node oracles and the lifted y-space problem.

A node's local functions act on ``x_{S_i}``, the concatenation (in ascending
node order) of the variables of its *scope* ``S_i``, a subset of the closed
neighborhood ``N_i`` that contains ``i``. The default scope is ``N_i``;
problems without variable coupling use ``S_i = {i}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import DimensionMismatch, NonFiniteValue, ShapeMismatch


@dataclass
class NodeProblem:
    """Local data of one node.

    ``grad_f`` returns the full gradient over ``x_{S_i}`` (the partial
    gradients for each scope member, concatenated); ``jac_g`` returns the
    ``p x D_i`` Jacobian whose column blocks are the per-neighbor blocks.
    ``A`` is ``m x D_i`` with the same column layout.
    """
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    f: Callable
    grad_f: Callable
    g: Callable
    jac_g: Callable
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    scope: Optional[tuple] = None

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, float))
        self.upper = np.atleast_1d(np.asarray(self.upper, float))
        if self.lower.shape != (self.dim,) or self.upper.shape != (self.dim,):
            raise ShapeMismatch(f"box bounds must have length {self.dim}")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ShapeMismatch("box bounds must be finite")
        if np.any(self.lower > self.upper):
            raise ShapeMismatch("lower bound exceeds upper bound")


@dataclass
class CoupledProblem:
    graph: object
    nodes: list
    p: int
    m: int
    batch: object = None            # optional vectorized evaluator
    slater_point: Optional[np.ndarray] = None
    lipschitz_hint: object = None   # analytic LipschitzEstimates, if known
    family: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.graph.n
        if len(self.nodes) != n:
            raise ShapeMismatch(f"{len(self.nodes)} node problems for {n} vertices")
        if self.p < 1 or self.m < 0:
            raise ShapeMismatch("need p >= 1 and m >= 0")
        for i, nd in enumerate(self.nodes):
            if nd.scope is None:
                nd.scope = self.graph.neighbors[i]
            nd.scope = tuple(sorted(int(j) for j in nd.scope))
            if i not in nd.scope or any(j not in self.graph.neighbors[i] for j in nd.scope):
                raise ShapeMismatch(f"scope of node {i + 1} must contain it and "
                                    f"lie in its neighborhood")
            D = sum(self.nodes[j].dim for j in nd.scope)
            if nd.A is None:
                nd.A = np.zeros((self.m, D))
            if nd.b is None:
                nd.b = np.zeros(self.m)
            nd.A = np.asarray(nd.A, float).reshape(self.m, -1)
            nd.b = np.asarray(nd.b, float).reshape(self.m)
            if nd.A.shape != (self.m, D):
                raise ShapeMismatch(f"A of node {i + 1} has shape {nd.A.shape}, "
                                    f"expected {(self.m, D)}")

    @property
    def n(self):
        return self.graph.n

    @property
    def coupled(self):
        """False when every local function depends on the node's own x only."""
        return any(len(nd.scope) > 1 for nd in self.nodes)

    @property
    def dims(self):
        return np.array([nd.dim for nd in self.nodes])

    def scope_slices(self, i):
        """Column ranges of each scope member inside x_{S_i}."""
        out, pos = {}, 0
        for j in self.nodes[i].scope:
            d = self.nodes[j].dim
            out[j] = slice(pos, pos + d)
            pos += d
        return out


@dataclass(frozen=True)
class LipschitzEstimates:
    L_f: float
    L_g: float
    beta: float
    max_nbhd: int

    @property
    def L_F(self):
        return self.L_f * self.max_nbhd

    @property
    def beta_tilde(self):
        return float(np.sqrt((1.0 + self.beta ** 2) * self.max_nbhd))

    def as_dict(self):
        return {"L_f": self.L_f, "L_g": self.L_g, "beta": self.beta,
                "max_nbhd": self.max_nbhd, "L_F": self.L_F,
                "beta_tilde": self.beta_tilde}


class NodeEvals:
    """Local function values at one x, plus the means to push gradients."""

    def __init__(self, f, g, scatter):
        self.f = f          # (n,)
        self.g = g          # (n, p)
        self._scatter = scatter

    def x_gradient(self, wf, wg):
        """sum_i wf_i grad f_i + J_i' wg_i, scattered onto the global x."""
        return self._scatter(wf, wg)


def _check_finite(arr, node, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(node, what)


class LiftedProblem:
    """The y-space problem: y_i = (x_i, t_i), G_i = g_i - t_i, B_i = diag(Abar_i, I)."""

    def __init__(self, problem: CoupledProblem):
        self.problem = problem
        n, p, m = problem.n, problem.p, problem.m
        self.n, self.p, self.m = n, p, m
        dims = problem.dims
        self.dims = dims
        self.x_off = np.concatenate([[0], np.cumsum(dims)]).astype(np.int64)
        self.nx = int(self.x_off[-1])
        self.N = self.nx + n * p
        # y layout: block i = [x_i, t_i]
        self.y_off = np.concatenate([[0], np.cumsum(dims + p)]).astype(np.int64)
        self.x_pos = np.concatenate(
            [self.y_off[i] + np.arange(dims[i]) for i in range(n)]).astype(np.int64)
        self.t_pos = np.array([self.y_off[i] + dims[i] + np.arange(p) for i in range(n)],
                              dtype=np.int64).reshape(n, p)
        self.lower = np.concatenate([nd.lower for nd in problem.nodes])
        self.upper = np.concatenate([nd.upper for nd in problem.nodes])

        # gather map: concatenated x_{S_i} over i -> positions in flat x
        gather, sizes = [], []
        for nd in problem.nodes:
            for j in nd.scope:
                gather.append(np.arange(self.x_off[j], self.x_off[j + 1]))
            sizes.append(sum(dims[j] for j in nd.scope))
        self.gather = np.concatenate(gather).astype(np.int64)
        self.gptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

        # Abar_i = sum over nodes j whose scope contains i of A_j[:, cols of i]
        self.Abar = [np.zeros((m, dims[i])) for i in range(n)]
        for j, nd in enumerate(problem.nodes):
            for i, sl in problem.scope_slices(j).items():
                self.Abar[i] = self.Abar[i] + nd.A[:, sl]
        self.b = np.array([nd.b for nd in problem.nodes]).reshape(n, m)
        # block-diagonal Abar as one sparse operator: (n*m) x nx
        self._Abar_bd = sp.block_diag([A if A.size else np.zeros((m, A.shape[1]))
                                       for A in self.Abar], format="csr") \
            if m else sp.csr_matrix((0, self.nx))
        self._Abar_bdT = self._Abar_bd.T.tocsr()
        self.BtB_norm = max(1.0, max(np.linalg.norm(A, 2) ** 2 if A.size else 0.0
                                     for A in self.Abar))

    # ---- layout helpers
    def split(self, y):
        y = np.asarray(y, float)
        if y.shape != (self.N,):
            raise DimensionMismatch(f"y has shape {y.shape}, expected ({self.N},)")
        return y[self.x_pos], y[self.t_pos]

    def join(self, x, t):
        y = np.empty(self.N)
        y[self.x_pos] = x
        y[self.t_pos] = np.asarray(t, float).reshape(self.n, self.p)
        return y

    def x_block(self, x, i):
        return x[self.x_off[i]:self.x_off[i + 1]]

    def gather_scope(self, x, i):
        return x[self.gather[self.gptr[i]:self.gptr[i + 1]]]

    # ---- local function evaluation
    def evaluate_x(self, x, derivatives=True):
        """Evaluate every f_i, g_i at the global x (optionally with gradients)."""
        pb = self.problem
        if pb.batch is not None:
            ev = pb.batch.evaluate(x, derivatives=derivatives)
            ok = np.isfinite(ev.f) & np.isfinite(ev.g).all(axis=1)
            if not ok.all():
                raise NonFiniteValue(int(np.argmin(ok)), "local function value")
            return ev
        n, p = self.n, self.p
        f = np.empty(n)
        g = np.empty((n, p))
        grads, jacs = [], []
        for i, nd in enumerate(pb.nodes):
            xs = self.gather_scope(x, i)
            f[i] = nd.f(xs)
            g[i] = np.asarray(nd.g(xs), float).reshape(p)
            _check_finite(f[i], i, "objective value")
            _check_finite(g[i], i, "constraint value")
            if derivatives:
                gr = np.asarray(nd.grad_f(xs), float).reshape(-1)
                jc = np.asarray(nd.jac_g(xs), float).reshape(p, -1)
                _check_finite(gr, i, "objective gradient")
                _check_finite(jc, i, "constraint Jacobian")
                grads.append(gr)
                jacs.append(jc)
        if not derivatives:
            return NodeEvals(f, g, None)
        G_all = np.concatenate(grads)
        J_all = np.concatenate(jacs, axis=1)
        sizes = np.diff(self.gptr)

        def scatter(wf, wg):
            w = np.zeros(len(self.gather))
            if wf is not None:
                w += np.repeat(np.asarray(wf, float), sizes) * G_all
            if wg is not None:
                wg_rep = np.repeat(np.asarray(wg, float).reshape(n, p), sizes, axis=0)
                w += np.einsum("kl,lk->k", wg_rep, J_all)
            return _kernels.scatter_add(self.gather, w, self.nx)

        return NodeEvals(f, g, scatter)

    # ---- lifted maps
    def eval_f(self, y):
        x, _ = self.split(y)
        return float(self.evaluate_x(x, derivatives=False).f.sum())

    def eval_grad_f(self, y):
        x, _ = self.split(y)
        ev = self.evaluate_x(x)
        out = np.zeros(self.N)
        out[self.x_pos] = ev.x_gradient(np.ones(self.n), None)
        return out

    def eval_G(self, y):
        x, t = self.split(y)
        return (self.evaluate_x(x, derivatives=False).g - t).ravel()

    def eval_jac_G_apply(self, y, w):
        """(dG/dy)' w: x-blocks sum_j (dg_j/dx_i)' w_j, t-blocks -w_i."""
        w = np.asarray(w, float)
        if w.shape != (self.n * self.p,):
            raise DimensionMismatch(f"w has shape {w.shape}, expected ({self.n * self.p},)")
        x, _ = self.split(y)
        ev = self.evaluate_x(x)
        out = np.empty(self.N)
        out[self.x_pos] = ev.x_gradient(None, w.reshape(self.n, self.p))
        out[self.t_pos] = -w.reshape(self.n, self.p)
        return out

    def project_Y(self, y):
        y = np.array(y, float, copy=True)
        if y.shape != (self.N,):
            raise DimensionMismatch(f"y has shape {y.shape}, expected ({self.N},)")
        y[self.x_pos] = np.clip(y[self.x_pos], self.lower, self.upper)
        return y

    # ---- the linear part B y - c, kept block diagonal
    def By_minus_c(self, y):
        """Per-node blocks B_i y_i - c_i as an (n, m+p) array."""
        x, t = self.split(y)
        out = np.empty((self.n, self.m + self.p))
        out[:, :self.m] = (self._Abar_bd @ x).reshape(self.n, self.m) - self.b
        out[:, self.m:] = t
        return out

    def apply_Bt(self, V):
        """B' v for v given as (n, m+p) node blocks; returns a y-shaped vector."""
        V = np.asarray(V, float).reshape(self.n, self.m + self.p)
        out = np.empty(self.N)
        out[self.x_pos] = self._Abar_bdT @ V[:, :self.m].ravel()
        out[self.t_pos] = V[:, self.m:]
        return out

    def consensus_residual(self, y):
        """(1 kron I)'(B y - c): stacked (sum_i (Abar_i x_i - b_i), sum_i t_i)."""
        return self.By_minus_c(y).sum(axis=0)

    def global_constraints(self, x):
        """sum_i g_i(x_{S_i}) and sum_i (A_i x_{S_i} - b_i) for the original problem."""
        ev = self.evaluate_x(x, derivatives=False)
        eq = ((self._Abar_bd @ x).reshape(self.n, self.m) - self.b).sum(axis=0)
        return ev.g.sum(axis=0), eq

    def objective_x(self, x):
        return float(self.evaluate_x(x, derivatives=False).f.sum())

    def t_star(self, x):
        """Slack split t_i = g_i(x) - (1/n) sum_j g_j(x), which sums to zero."""
        g = self.evaluate_x(x, derivatives=False).g
        return g - g.mean(axis=0)

    def lift_point(self, x):
        return self.join(x, self.t_star(x))


def lift(problem: CoupledProblem) -> LiftedProblem:
    return LiftedProblem(problem)


# ---------------------------------------------------------------- checks

def _sample_box(rng, lower, upper, interior=0.0):
    span = upper - lower
    return lower + span * (interior + (1 - 2 * interior) * rng.random(len(lower)))


def _scope_box(problem, i):
    nodes = problem.nodes
    sc = nodes[i].scope
    return (np.concatenate([nodes[j].lower for j in sc]),
            np.concatenate([nodes[j].upper for j in sc]))


def estimate_lipschitz(problem, samples=64, seed=0):
    """Sampled L_f, L_g and beta over each X_{S_i}.

    Pairs are drawn both far apart and as short random perturbations (which
    probe the local derivative), and box corners are included for small
    scopes. Sampled constants are lower estimates of the true ones. Constant
    Jacobians (to 1e-12) give exactly L_g = 0; constant gradients give L_f = 0.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    L_f = L_g = beta = 0.0
    for i, nd in enumerate(problem.nodes):
        lo, hi = _scope_box(problem, i)
        D = len(lo)
        pts = [_sample_box(rng, lo, hi) for _ in range(samples)]
        if D <= 6:
            for mask in range(2 ** D):
                pts.append(np.where([(mask >> k) & 1 for k in range(D)], hi, lo))
        grads, jacs, vals = [], [], []
        for pt in pts:
            grads.append(np.asarray(nd.grad_f(pt), float).ravel())
            jacs.append(np.asarray(nd.jac_g(pt), float).reshape(problem.p, D))
            vals.append(np.asarray(nd.g(pt), float).ravel())
        grads, jacs, vals = np.array(grads), np.array(jacs), np.array(vals)
        const_grad = np.abs(grads - grads[0]).max() <= 1e-12
        const_jac = np.abs(jacs - jacs[0]).max() <= 1e-12
        beta = max(beta, max(np.linalg.norm(J, 2) for J in jacs))
        pairs = [(a, b) for a, b in zip(range(len(pts)), rng.permutation(len(pts))) if a != b]
        for a, b in pairs:
            dx = np.linalg.norm(pts[a] - pts[b])
            if dx == 0:
                continue
            if not const_grad:
                L_f = max(L_f, np.linalg.norm(grads[a] - grads[b]) / dx)
            if not const_jac:
                L_g = max(L_g, np.abs(np.linalg.norm(jacs[a] - jacs[b], axis=1)).max() / dx)
            beta = max(beta, np.linalg.norm(vals[a] - vals[b]) / dx)
        # short perturbations probe the local curvature
        h = 1e-4 * (1 + np.abs(hi - lo).max())
        for a in range(len(pts)):
            dirn = rng.standard_normal(D)
            dirn *= h / np.linalg.norm(dirn)
            q = np.clip(pts[a] + dirn, lo, hi)
            dx = np.linalg.norm(q - pts[a])
            if dx == 0:
                continue
            if not const_grad:
                gq = np.asarray(nd.grad_f(q), float).ravel()
                L_f = max(L_f, np.linalg.norm(gq - grads[a]) / dx)
            if not const_jac:
                Jq = np.asarray(nd.jac_g(q), float).reshape(problem.p, D)
                L_g = max(L_g, np.linalg.norm(Jq - jacs[a], axis=1).max() / dx)
            gv = np.asarray(nd.g(q), float).ravel()
            beta = max(beta, np.linalg.norm(gv - vals[a]) / dx)
    max_nbhd = max(len(nb) for nb in problem.graph.neighbors)
    return LipschitzEstimates(L_f=float(L_f), L_g=float(L_g), beta=float(max(beta, 1e-300)),
                              max_nbhd=max_nbhd)


def lipschitz_for(problem, samples=64, seed=0):
    """Analytic constants when the problem carries them, sampled otherwise."""
    if problem.lipschitz_hint is not None:
        return problem.lipschitz_hint
    return estimate_lipschitz(problem, samples=samples, seed=seed)


def central_gradient(fun, x, rel_step=1e-6):
    """Central finite differences with step rel_step * (1 + |x_k|)."""
    x = np.asarray(x, float)
    out = np.empty_like(x)
    for k in range(len(x)):
        h = rel_step * (1.0 + abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        out[k] = (fun(xp) - fun(xm)) / (2 * h)
    return out


@dataclass
class DerivativeReport:
    max_rel_err_f: float
    max_rel_err_g: float
    worst_node: int

    @property
    def ok(self):
        return max(self.max_rel_err_f, self.max_rel_err_g) <= 1e-5


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0)


def check_derivatives(problem, points=20, seed=0):
    """Compare user gradients/Jacobians with central differences at interior points."""
    rng = np.random.default_rng(seed)
    worst_f = worst_g = 0.0
    worst_node = -1
    for i, nd in enumerate(problem.nodes):
        lo, hi = _scope_box(problem, i)
        for _ in range(points):
            xs = _sample_box(rng, lo, hi, interior=0.05)
            ef = _rel(np.asarray(nd.grad_f(xs), float).ravel(),
                      central_gradient(lambda v: float(nd.f(v)), xs))
            J = np.asarray(nd.jac_g(xs), float).reshape(problem.p, -1)
            eg = max(_rel(J[l], central_gradient(lambda v: float(np.ravel(nd.g(v))[l]), xs))
                     for l in range(problem.p))
            if max(ef, eg) > max(worst_f, worst_g):
                worst_node = i
            worst_f, worst_g = max(worst_f, ef), max(worst_g, eg)
    return DerivativeReport(worst_f, worst_g, worst_node)


def cross_partials_vanish(problem, points=5, seed=0, tol=1e-8):
    """True when no local function reacts to a neighbor's variable.

    Used to validate the no-coupling flag of problems whose scopes were
    declared as full neighborhoods.
    """
    rng = np.random.default_rng(seed)
    for i, nd in enumerate(problem.nodes):
        lo, hi = _scope_box(problem, i)
        slices = problem.scope_slices(i)
        for _ in range(points):
            xs = _sample_box(rng, lo, hi, interior=0.05)
            gf = np.asarray(nd.grad_f(xs), float).ravel()
            J = np.asarray(nd.jac_g(xs), float).reshape(problem.p, -1)
            for j, sl in slices.items():
                if j == i:
                    continue
                if (np.abs(gf[sl]).max(initial=0) > tol or np.abs(J[:, sl]).max(initial=0) > tol
                        or np.abs(nd.A[:, sl]).max(initial=0) > tol):
                    return False
    return True


@dataclass
class ConvexityReport:
    checks: int
    failures: list

    @property
    def ok(self):
        return not self.failures


def convexity_spot_check(problem, samples=50, seed=0, tol=1e-9):
    """Midpoint tests of sum_i f_i on X_V and of each g_i on X_{S_i}.

    A failure disproves convexity; passing proves nothing.
    """
    rng = np.random.default_rng(seed)
    lp = lift(problem)
    fails = []
    for s in range(samples):
        a = _sample_box(rng, lp.lower, lp.upper)
        b = _sample_box(rng, lp.lower, lp.upper)
        ea, eb = lp.evaluate_x(a, False), lp.evaluate_x(b, False)
        em = lp.evaluate_x(0.5 * (a + b), False)
        lhs, rhs = em.f.sum(), 0.5 * (ea.f.sum() + eb.f.sum())
        if lhs > rhs + tol * (1 + abs(rhs)):
            fails.append(("objective", s, float(lhs - rhs)))
        gap = em.g - 0.5 * (ea.g + eb.g)
        bad = np.argwhere(gap > tol * (1 + np.abs(em.g)))
        for i, l in bad:
            fails.append((f"g[{i + 1}][{l + 1}]", s, float(gap[i, l])))
    return ConvexityReport(samples, fails)
