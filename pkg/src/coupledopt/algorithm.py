"""Projected primal-dual iteration with virtual queues.

Stacked form, one iteration k -> k+1 (strictly in this order)::

    y+ = P_Y[y - gamma * d]
    q+ = max(-G(y+), q + G(y+))
    u+ = W u + (B y+ - c - z) / rho
    z+ = z + rho H u+

where d is the gradient at y of

    R(v) = f(v) + <q + G(y), G(v)> + <W u - z/rho, B v - c> + |B v - c|^2 / (2 rho).

Dual blocks are stored as (n, m+p) arrays so W and H act as P^W, P^H on rows.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionMismatch, MissingNeighborMessage, NonFiniteValue


@dataclass(frozen=True)
class AlgoParams:
    gamma: float
    rho: float
    max_iter: int
    wp: object

    def __post_init__(self):
        if not (self.gamma > 0 and np.isfinite(self.gamma)):
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not (self.rho > 0 and np.isfinite(self.rho)):
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")


@dataclass
class AlgoState:
    k: int
    y: np.ndarray
    q: np.ndarray           # (n, p)
    u: np.ndarray           # (n, m+p)
    z: np.ndarray           # (n, m+p)
    ybar_sum: np.ndarray    # sum of y^1..y^k
    G: np.ndarray = None    # G(y^k) as (n, p)
    u0: np.ndarray = None
    evals: object = field(default=None, repr=False)   # local evaluations at x^k

    @property
    def ybar(self):
        return None if self.k == 0 else self.ybar_sum / self.k


def _nonfinite_node(arr):
    arr = np.asarray(arr)
    bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1)))
    return int(bad[0, 0]) if len(bad) else -1


def init_state(lp, params, y0=None, u0=None):
    """Initial state: z0 = rho H u0, q0 = max(-G(y0), 0)."""
    if y0 is None:
        y0 = lp.project_Y(np.zeros(lp.N))
    y0 = np.asarray(y0, float)
    if y0.shape != (lp.N,):
        raise DimensionMismatch(f"y0 has shape {y0.shape}, expected ({lp.N},)")
    yp = lp.project_Y(y0)
    if not np.array_equal(yp, y0):
        warnings.warn("y0 is outside Y; projecting it", stacklevel=2)
        y0 = yp
    shape = (lp.n, lp.m + lp.p)
    u0 = np.zeros(shape) if u0 is None else np.asarray(u0, float).reshape(shape)
    x, t = lp.split(y0)
    ev = lp.evaluate_x(x)
    G = ev.g - t
    z0 = params.rho * params.wp.apply_H(u0)
    return AlgoState(k=0, y=y0.copy(), q=np.maximum(-G, 0.0), u=u0.copy(), z=z0,
                     ybar_sum=np.zeros(lp.N), G=G, u0=u0.copy(), evals=ev)


def _evals(lp, state):
    if state.evals is None:
        x, t = lp.split(state.y)
        state.evals = lp.evaluate_x(x)
        state.G = state.evals.g - t
    return state.evals


def compute_d_stacked(lp, state, params):
    """Gradient of R at y^k, assembled block by block."""
    ev = _evals(lp, state)
    rho = params.rho
    w = state.q + state.G
    V = params.wp.apply_W(state.u) - state.z / rho + lp.By_minus_c(state.y) / rho
    d = lp.apply_Bt(V)
    d[lp.x_pos] += ev.x_gradient(np.ones(lp.n), w)
    d[lp.t_pos] -= w
    if not np.all(np.isfinite(d)):
        pos = int(np.argmax(~np.isfinite(d)))
        raise NonFiniteValue(int(np.searchsorted(lp.y_off, pos, "right") - 1), "primal direction")
    return d


def augmented_value(lp, state, params, y):
    """R^k(y) for the current state; the primal step follows its gradient."""
    x, t = lp.split(y)
    ev = lp.evaluate_x(x, derivatives=False)
    Gy = ev.g - t
    _evals(lp, state)
    r = lp.By_minus_c(y)
    mult = params.wp.apply_W(state.u) - state.z / params.rho
    return float(ev.f.sum() + np.sum((state.q + state.G) * Gy) + np.sum(mult * r)
                 + np.sum(r * r) / (2 * params.rho))


def step_stacked(lp, state, params):
    """One full iteration; returns a new state."""
    d = compute_d_stacked(lp, state, params)
    rho = params.rho
    y = lp.project_Y(state.y - params.gamma * d)
    x, t = lp.split(y)
    ev = lp.evaluate_x(x)
    G = ev.g - t
    q = np.maximum(-G, state.q + G)
    u = params.wp.apply_W(state.u) + (lp.By_minus_c(y) - state.z) / rho
    z = state.z + rho * params.wp.apply_H(u)
    for name, arr in (("multiplier u", u), ("auxiliary z", z)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(_nonfinite_node(arr), name)
    return AlgoState(k=state.k + 1, y=y, q=q, u=u, z=z, ybar_sum=state.ybar_sum + y,
                     G=G, u0=state.u0, evals=ev)


# ---------------------------------------------------------------- local pieces

@dataclass
class LocalView:
    """What node i holds when it forms its own block of d."""
    i: int
    neighbors: tuple            # N_i, ascending
    sources: tuple              # nodes that send cross terms to i (includes i)
    pw_row: dict                # j -> [P^W]_ij for j in N_i
    Abar: np.ndarray            # m x d_i
    b: np.ndarray               # m
    x: np.ndarray
    t: np.ndarray
    q: np.ndarray
    z: np.ndarray
    g: np.ndarray               # g_i(x_{S_i}^k)
    rho: float
    round: int = 0


def cross_terms(nd, slices, xs, w):
    """Per-target vectors df_i/dx_j + (dg_i/dx_j)' w that node i sends to j."""
    gf = np.asarray(nd.grad_f(xs), float).ravel()
    J = np.asarray(nd.jac_g(xs), float).reshape(len(w), -1)
    tot = gf + J.T @ w
    return {j: tot[sl] for j, sl in slices.items()}


def compute_d_local(i, local, inbox):
    """Block d_i of the primal direction from local data and neighbor messages.

    ``inbox`` maps ``"u"`` to {j: u_j^k} over N_i and ``"cross"`` to
    {j: cross term from j} over the cross-term sources.
    """
    m = local.Abar.shape[0]
    u_in = inbox.get("u", {})
    cross_in = inbox.get("cross", {})
    mix = None
    for j in local.neighbors:
        if j not in u_in:
            raise MissingNeighborMessage(i, j, local.round, "u")
        term = local.pw_row[j] * u_in[j]
        mix = term if mix is None else mix + term
    gx = None
    for j in local.sources:
        if j not in cross_in:
            raise MissingNeighborMessage(i, j, local.round, "cross-term")
        gx = cross_in[j] if gx is None else gx + cross_in[j]
    rho = local.rho
    v = mix - local.z / rho
    w = local.q + local.g - local.t
    dx = gx + local.Abar.T @ (v[:m] + (local.Abar @ local.x - local.b) / rho)
    dt = v[m:] + local.t / rho - w
    return np.concatenate([dx, dt])


# ---------------------------------------------------------------- driver

@dataclass
class Trajectory:
    state: AlgoState
    engine: str
    records: dict = field(default_factory=dict)
    audit: object = None
    history: list = None

    @property
    def k(self):
        return self.state.k

    @property
    def ybar(self):
        return self.state.ybar


def run(lp, params, y0=None, u0=None, hooks=(), engine="stacked", audit=False,
        keep_history=False, actor_factory=None):
    """Run ``params.max_iter`` iterations with the chosen engine.

    Each hook is called as ``hook(state, lp, params)`` after initialization
    and after every iteration; a hook returning True stops the run early.
    """
    history = [] if keep_history else None

    def observe(state):
        if history is not None:
            history.append(replace(state, evals=None, y=state.y.copy(), q=state.q.copy(),
                                   u=state.u.copy(), z=state.z.copy(),
                                   ybar_sum=state.ybar_sum.copy()))
        stop = False
        for h in hooks:
            stop = bool(h(state, lp, params)) or stop
        return stop

    if engine == "stacked":
        state = init_state(lp, params, y0, u0)
        stop = observe(state)
        while state.k < params.max_iter and not stop:
            state = step_stacked(lp, state, params)
            stop = observe(state)
        traj = Trajectory(state=state, engine=engine, history=history)
    elif engine == "decentralized":
        from .network import Simulator
        sim = Simulator(lp, params, y0=y0, u0=u0, actor_factory=actor_factory)
        sim.setup_round()
        state = sim.global_state()
        stop = observe(state)
        while sim.k < params.max_iter and not stop:
            sim.iteration_round()
            state = sim.global_state()
            stop = observe(state)
        traj = Trajectory(state=state, engine=engine, history=history,
                          audit=sim.audit_report() if audit else None)
    else:
        raise ConfigError(f"unknown engine {engine!r}")
    for h in hooks:
        rec = getattr(h, "records", None)
        if rec is not None:
            traj.records[getattr(h, "name", type(h).__name__)] = rec
    return traj
