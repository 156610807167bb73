"""Offline ground truth: reference optima, dual estimates and rate constants.

Nothing here runs inside the decentralized iteration. The reference solver
is an augmented-Lagrangian method on the original (un-lifted) problem with a
box-constrained quasi-Newton inner solve; tiny single-constraint instances
are also solved by grid refinement so the two paths can be cross-checked.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, lsq_linear, minimize

from .errors import BudgetExhausted, Infeasible, NegativeC, NoSlaterPoint
from .problem import lipschitz_for

EIG_TOL = 1e-10


# ---------------------------------------------------------------- reference solve

@dataclass
class ReferenceSolution:
    x_star: np.ndarray          # flat, node-major
    f_star: float
    method: str                 # "grid" or "penalty-pg"
    residuals: dict
    converged: bool = True
    multipliers: dict = field(default_factory=dict)
    iterations: int = 0

    def node(self, lp, i):
        return lp.x_block(self.x_star, i)

    def as_dict(self):
        return {"x_star": self.x_star.tolist(), "f_star": self.f_star, "method": self.method,
                "residuals": self.residuals, "converged": self.converged,
                "iterations": self.iterations}


def _eq_operator(lp):
    """E, e with sum_i (A_i x_{S_i} - b_i) = E x - e."""
    E = np.hstack(lp.Abar) if lp.nx else np.zeros((lp.m, 0))
    return E, lp.b.sum(axis=0)


def _residuals(lp, x):
    h, eq = lp.global_constraints(x)
    return {"ineq": float(max(0.0, h.max())), "eq": float(np.linalg.norm(eq))}


def _values_many(lp, X):
    """Objective and summed constraints at the rows of X."""
    batch = lp.problem.batch
    if batch is not None and hasattr(batch, "values_many"):
        F, H, _ = batch.values_many(X)
        return F, H
    F = np.empty(len(X))
    H = np.empty((len(X), lp.p))
    for r, x in enumerate(X):
        ev = lp.evaluate_x(x, derivatives=False)
        F[r], H[r] = ev.f.sum(), ev.g.sum(axis=0)
    return F, H


def _grid_solve(lp, tol, points=21, spacing=1e-4):
    lo, hi = lp.lower.copy(), lp.upper.copy()
    span0 = hi - lo
    best = None
    while True:
        axes = [np.linspace(a, b, points) if b > a else np.array([a]) for a, b in zip(lo, hi)]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, lp.nx)
        F, H = _values_many(lp, X)
        feas = H.max(axis=1) <= 0.0
        if not feas.any():
            if best is None:
                raise Infeasible("no feasible grid point")
        else:
            F = np.where(feas, F, np.inf)
            r = int(np.argmin(F))
            if best is None or F[r] <= best[1]:
                best = (X[r].copy(), float(F[r]))
        step = (hi - lo) / (points - 1)
        if np.all(step <= spacing * np.maximum(span0, 1e-300)):
            break
        c = best[0]
        lo = np.maximum(lp.lower, c - 3 * step)
        hi = np.minimum(lp.upper, c + 3 * step)
    return best


def solve_reference(problem_or_lp, tol=1e-6, budget=80, method="auto", strict=False):
    """Reference optimum of the original problem.

    ``method="auto"`` uses grid refinement for tiny single-constraint
    problems without equalities and the augmented-Lagrangian path otherwise.
    On budget exhaustion the best point is returned with ``converged=False``
    (or :class:`BudgetExhausted` is raised when ``strict``).
    """
    from .problem import LiftedProblem, lift
    lp = problem_or_lp if isinstance(problem_or_lp, LiftedProblem) else lift(problem_or_lp)
    E, e = _eq_operator(lp)
    tiny = lp.nx <= 4 and lp.p == 1 and not np.any(E)
    if method == "grid" or (method == "auto" and tiny):
        x, f = _grid_solve(lp, tol)
        return ReferenceSolution(x_star=x, f_star=f, method="grid", residuals=_residuals(lp, x))
    return _alm_solve(lp, E, e, tol, budget, strict)


def _alm_solve(lp, E, e, tol, budget, strict):
    n, p = lp.n, lp.p
    ones = np.ones(n)
    bounds = list(zip(lp.lower, lp.upper))
    x = np.clip(np.zeros(lp.nx), lp.lower, lp.upper)
    if lp.problem.slater_point is not None:
        x = np.clip(np.asarray(lp.problem.slater_point, float), lp.lower, lp.upper)
    lam, nu, mu = np.zeros(p), np.zeros(lp.m), 10.0
    prev_res, res = np.inf, np.inf

    def phi(z):
        ev = lp.evaluate_x(z)
        h = ev.g.sum(axis=0)
        r = E @ z - e
        w = np.maximum(0.0, lam + mu * h)
        val = ev.f.sum() + (w @ w - lam @ lam) / (2 * mu) + nu @ r + 0.5 * mu * r @ r
        grad = ev.x_gradient(ones, np.tile(w, (n, 1))) + E.T @ (nu + mu * r)
        return val, grad

    it = 0
    for it in range(1, budget + 1):
        sol = minimize(phi, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 20000, "ftol": 1e-16, "gtol": 1e-12, "maxcor": 30})
        x_new = sol.x
        h, r = lp.global_constraints(x_new)
        res = max(np.linalg.norm(np.maximum(h, -lam / mu)), np.linalg.norm(r))
        lam = np.maximum(0.0, lam + mu * h)
        nu = nu + mu * r
        dx = np.abs(x_new - x).max()
        x = x_new
        if res <= tol * 1e-2 and dx <= tol * 1e-2:
            break
        if res > 0.25 * prev_res:
            mu *= 2.0
        if mu > 1e12 and res > tol:
            raise Infeasible(f"penalty residual stalled at {res:.3g}")
        prev_res = res
    else:
        x, lam, nu = _polish(lp, E, e, x, lam, nu)
        ref = ReferenceSolution(x_star=x, f_star=lp.objective_x(x), method="penalty-pg",
                                residuals=_residuals(lp, x), converged=res <= tol,
                                multipliers={"lambda": lam, "nu": nu}, iterations=it)
        if strict and not ref.converged:
            err = BudgetExhausted(f"reference solve did not reach tol={tol}")
            err.solution = ref
            raise err
        return ref
    x, lam, nu = _polish(lp, E, e, x, lam, nu)
    return ReferenceSolution(x_star=x, f_star=lp.objective_x(x), method="penalty-pg",
                             residuals=_residuals(lp, x), converged=True,
                             multipliers={"lambda": lam, "nu": nu}, iterations=it)


def _polish(lp, E, e, x, lam, nu, bound_tol=1e-10):
    """Refine (x, lambda, nu) on the identified active set.

    Solves stationarity over the free coordinates, the active inequalities
    and the equality as one nonlinear least-squares system. The refined
    point is kept only if it stays in the box, keeps lambda >= 0 and lowers
    the KKT residual.
    """
    n, p = lp.n, lp.p
    span = lp.upper - lp.lower
    free = (x > lp.lower + bound_tol * (1 + span)) & (x < lp.upper - bound_tol * (1 + span))
    act = lam > 0
    nf, na = int(free.sum()), int(act.sum())
    if nf == 0:
        return x, lam, nu

    def unpack(zv):
        xx = x.copy()
        xx[free] = zv[:nf]
        ll = np.zeros(p)
        ll[act] = zv[nf:nf + na]
        return xx, ll, zv[nf + na:]

    def kkt(zv):
        xx, ll, vv = unpack(zv)
        ev = lp.evaluate_x(xx)
        grad = ev.x_gradient(np.ones(n), np.tile(ll, (n, 1))) + E.T @ vv
        h = ev.g.sum(axis=0)
        return np.concatenate([grad[free], h[act], E @ xx - e])

    z0 = np.concatenate([x[free], lam[act], nu])
    r0 = np.linalg.norm(kkt(z0))
    try:
        sol = least_squares(kkt, z0, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                            max_nfev=200)
    except (ValueError, FloatingPointError):
        return x, lam, nu
    xx, ll, vv = unpack(sol.x)
    inside = np.all(xx >= lp.lower) and np.all(xx <= lp.upper)
    h = lp.global_constraints(xx)[0]
    if inside and np.all(ll >= 0) and np.all(h[~act] < 0) and np.linalg.norm(sol.fun) < r0:
        return xx, ll, vv
    return x, lam, nu


# ---------------------------------------------------------------- dual estimates

@dataclass
class DualEstimate:
    lambda_star: np.ndarray     # lifted, (n*p,), every node block equal
    u_star: np.ndarray          # (n, m+p), consensus rows (nu, lambda)
    lam: np.ndarray             # multiplier of sum_i g_i <= 0, (p,)
    nu: np.ndarray              # multiplier of the global equality, (m,)
    residual: float             # stationarity residual on the free coordinates
    lambda_bound: float         # Slater upper bound on |lambda_star|_1
    rank_deficient: bool = False

    def __iter__(self):
        yield self.lambda_star
        yield self.u_star


def find_slater_point(lp, samples=2000, seed=0):
    E, e = _eq_operator(lp)
    sp = lp.problem.slater_point
    if sp is not None:
        return np.asarray(sp, float)
    if np.any(E):
        raise NoSlaterPoint("equality constraints present and no Slater point supplied")
    rng = np.random.default_rng(seed)
    X = lp.lower + (lp.upper - lp.lower) * rng.random((samples, lp.nx))
    _, H = _values_many(lp, X)
    slack = -H.max(axis=1)
    r = int(np.argmax(slack))
    if slack[r] <= 0:
        raise NoSlaterPoint("interior sampling found no strictly feasible point")
    return X[r]


def slater_bound(lp, f_star, x_tilde):
    """|lambda*|_1 <= n (f(x~) - f*) / min_j(-sum_i g_ij(x~)) for the lifted problem."""
    h, r = lp.global_constraints(x_tilde)
    slack = -h.max()
    if slack <= 0 or np.linalg.norm(r) > 1e-8:
        raise NoSlaterPoint("supplied point is not strictly feasible")
    return lp.n * max(lp.objective_x(x_tilde) - f_star, 0.0) / slack


def estimate_dual(lp, ref, active_tol=1e-7, free_tol=1e-8):
    """KKT multipliers at the reference point.

    Solves the stationarity system restricted to coordinates strictly inside
    their box: nonnegative least squares for the inequality multiplier (with
    inactive components fixed at zero) and the minimum-norm least-squares
    solution for the equality multiplier.
    """
    n, p, m = lp.n, lp.p, lp.m
    x = ref.x_star
    ev = lp.evaluate_x(x)
    grad_f = ev.x_gradient(np.ones(n), None)
    Jh = np.stack([ev.x_gradient(None, np.tile(np.eye(p)[j], (n, 1))) for j in range(p)], 1)
    E, _ = _eq_operator(lp)
    h = ev.g.sum(axis=0)
    span = lp.upper - lp.lower
    free = (x > lp.lower + free_tol * (1 + span)) & (x < lp.upper - free_tol * (1 + span))
    active = h >= -active_tol * (1 + np.abs(h))

    g0, J, Et = grad_f[free], Jh[free][:, active], E.T[free]
    lam = np.zeros(p)
    if J.shape[1] and free.any():
        # eliminate nu first so lambda sees only the part orthogonal to range(E')
        Pn = np.eye(len(g0)) - Et @ np.linalg.pinv(Et) if Et.size else np.eye(len(g0))
        sol = lsq_linear(Pn @ J, -Pn @ g0, bounds=(0.0, np.inf), method="bvls",
                         tol=1e-14, lsmr_tol=None)
        lam[active] = sol.x
    rhs = g0 + Jh[free] @ lam
    if Et.size:
        nu = -np.linalg.pinv(Et, rcond=1e-12) @ rhs
        rank_def = np.linalg.matrix_rank(Et) < m
    else:
        nu, rank_def = np.zeros(m), m > 0
    resid = float(np.linalg.norm(rhs + Et @ nu)) if free.any() else 0.0
    try:
        bound = slater_bound(lp, ref.f_star, find_slater_point(lp))
    except NoSlaterPoint:
        bound = np.inf
    return DualEstimate(lambda_star=np.tile(lam, n), u_star=np.tile(np.concatenate([nu, lam]), (n, 1)),
                        lam=lam, nu=nu, residual=resid, lambda_bound=float(bound),
                        rank_deficient=bool(rank_def))


# ---------------------------------------------------------------- constants

def h_pinv(PH, tol=EIG_TOL):
    w, V = np.linalg.eigh(PH)
    inv = np.where(np.abs(w) > tol, 1.0 / np.where(np.abs(w) > tol, w, 1.0), 0.0)
    return (V * inv) @ V.T


def w_norm(PW, U):
    U = np.asarray(U, float)
    return float(np.sqrt(max(np.sum(U * (PW @ U)), 0.0)))


@dataclass
class RateConstants:
    lambda_star: np.ndarray
    u_star: np.ndarray
    z_star: np.ndarray
    y_star: np.ndarray
    f_star: float
    C: float
    D0: float
    C0: float
    S0: float
    gamma_tilde: float
    gamma: float
    rho: float
    lam_norm: float
    n: int
    terms: dict
    lipschitz: dict
    condition_slack: float          # 1/gamma minus the right side of the step condition
    affine_g: bool = False

    @property
    def C_nonneg(self):
        return self.C >= 0

    @property
    def theoretical_guarantee(self):
        return bool(self.C >= 0 and self.condition_slack >= -1e-10 / self.gamma)

    @property
    def ineq_bound_coef(self):
        return 2 * (self.lam_norm + np.sqrt(max(self.C, 0.0)))

    def bounds_at(self, k):
        k = np.asarray(k, float)
        a = self.ineq_bound_coef
        return {"G_avg": a / k, "consensus": self.D0 / k, "f_upper": self.S0 / k,
                "f_lower": -self.C0 / k, "sum_g": (self.n * a + self.D0) / k,
                "eq": self.D0 / k}

    def as_dict(self):
        return {"C": self.C, "D0": self.D0, "C0": self.C0, "S0": self.S0,
                "gamma_tilde": self.gamma_tilde, "gamma": self.gamma, "rho": self.rho,
                "lambda_norm": self.lam_norm, "f_star": self.f_star, "n": self.n,
                "theoretical_guarantee": self.theoretical_guarantee,
                "condition_slack": self.condition_slack, "affine_g": self.affine_g,
                "terms": self.terms, "lipschitz": self.lipschitz,
                "lambda_star": self.lambda_star.tolist(), "u_star": self.u_star.tolist()}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)

    @classmethod
    def from_dict(cls, doc):
        """Rebuild from :meth:`as_dict` output (y* and z* are not stored)."""
        return cls(lambda_star=np.asarray(doc["lambda_star"], float),
                   u_star=np.asarray(doc["u_star"], float), z_star=None, y_star=None,
                   f_star=doc["f_star"], C=doc["C"], D0=doc["D0"], C0=doc["C0"], S0=doc["S0"],
                   gamma_tilde=doc["gamma_tilde"], gamma=doc["gamma"], rho=doc["rho"],
                   lam_norm=doc["lambda_norm"], n=doc["n"], terms=doc["terms"],
                   lipschitz=doc["lipschitz"], condition_slack=doc["condition_slack"],
                   affine_g=doc["affine_g"])


def gamma_condition_slack(gamma, C, lam_norm, D_parts, L_g, n, p):
    """1/gamma - (|B'B|/rho + beta~^2 + L_F + 4 sqrt(np) (|lambda*| + sqrt C) L_g)."""
    rhs = D_parts + 4 * np.sqrt(n * p) * (lam_norm + np.sqrt(max(C, 0.0))) * L_g
    return 1.0 / gamma - rhs


def compute_constants(lp, ref, duals, params, y0=None, u0=None, z0=None, lipschitz=None,
                      gamma=None, strict=False):
    """C, D0, C0, S0 and the step bound gamma~ at the reference optimum.

    ``gamma`` overrides ``params.gamma`` (pass ``"tilde"`` to evaluate at
    gamma~ itself). With ``strict`` a negative C raises :class:`NegativeC`.
    """
    n, p, m = lp.n, lp.p, lp.m
    rho, wp = params.rho, params.wp
    lip = lipschitz if lipschitz is not None else lipschitz_for(lp.problem)
    lam_star, u_star = duals.lambda_star, duals.u_star
    lam_norm = float(np.linalg.norm(lam_star))

    y_star = lp.lift_point(ref.x_star)
    z_star = lp.By_minus_c(y_star)
    y0 = lp.project_Y(np.zeros(lp.N)) if y0 is None else np.asarray(y0, float)
    u0 = np.zeros((n, m + p)) if u0 is None else np.asarray(u0, float).reshape(n, m + p)
    z0 = rho * wp.apply_H(u0) if z0 is None else np.asarray(z0, float).reshape(n, m + p)

    Hp = h_pinv(wp.PH)
    dz = z0 - z_star
    zH = float(np.sum(dz * (Hp @ dz)))
    u0W, usW = w_norm(wp.PW, u0), w_norm(wp.PW, u_star)
    G0 = lp.eval_G(y0)
    Gs = lp.eval_G(y_star)
    q0 = np.maximum(-G0, 0.0)
    delta = y0 - y_star
    d2 = float(delta @ delta)
    BD = lp.By_minus_c(y0) - z_star           # B(y0 - y*)
    bd2 = float(np.sum(BD * BD))

    R = (zH / (2 * rho) + 0.5 * rho * (u0W + usW) ** 2 + 0.5 * G0 @ G0 + 0.5 * Gs @ Gs
         + 0.5 * q0 @ q0 + lam_norm ** 2 - bd2 / (2 * rho))
    BtB = lp.BtB_norm
    D_parts = BtB / rho + lip.beta_tilde ** 2 + lip.L_F
    D = D_parts + 4 * np.sqrt(n * p) * lip.L_g * lam_norm
    a = 2 * lip.L_g * np.sqrt(n * p) * np.sqrt(d2)
    gamma_tilde = 1.0 / (np.sqrt(a * a + D + 4 * np.sqrt(n * p) * lip.L_g * np.sqrt(max(R, 0.0)))
                         + a) ** 2

    if gamma is None:
        gamma = params.gamma
    elif gamma == "tilde":
        gamma = gamma_tilde
    C = R + d2 / (2 * gamma)
    if C < 0:
        denom = bd2 / rho - 2 * R
        hi = d2 / denom if denom > 0 else np.inf
        msg = f"C = {C:.4g} < 0 at gamma = {gamma:.4g}; C >= 0 needs gamma <= {hi:.4g}"
        if strict:
            raise NegativeC(msg)
    sC = np.sqrt(max(C, 0.0))
    root = usW + u0W + np.sqrt(2 * max(C, 0.0) / rho)
    D0 = rho * np.sqrt(n) * root
    C0 = 2 * (lam_norm + sC) * float(lam_star.sum()) + rho * float(np.linalg.norm(u_star)) * root
    S0 = zH / (2 * rho) + 0.5 * rho * u0W ** 2 + 0.5 * (d2 / gamma - bd2 / rho) \
        + 0.5 * q0 @ q0 - 0.5 * G0 @ G0
    slack = gamma_condition_slack(gamma, C, lam_norm, D_parts, lip.L_g, n, p)
    terms = {"zH": zH, "u0_W": u0W, "ustar_W": usW, "G0_sq": float(G0 @ G0),
             "Gstar_sq": float(Gs @ Gs), "q0_sq": float(q0 @ q0), "delta_sq": d2,
             "B_delta_sq": bd2, "R": float(R), "D": float(D), "BtB_norm": BtB}
    return RateConstants(lambda_star=lam_star, u_star=u_star, z_star=z_star, y_star=y_star,
                         f_star=ref.f_star, C=float(C), D0=float(D0), C0=float(C0), S0=float(S0),
                         gamma_tilde=float(gamma_tilde), gamma=float(gamma), rho=rho,
                         lam_norm=lam_norm, n=n, terms=terms, lipschitz=lip.as_dict(),
                         condition_slack=float(slack), affine_g=lip.L_g == 0)


def theoretical_pipeline(lp, params, y0=None, u0=None, tol=1e-8, ref=None):
    """Reference solve, dual estimate and gamma~ in one call."""
    ref = ref if ref is not None else solve_reference(lp, tol=tol)
    duals = estimate_dual(lp, ref)
    const = compute_constants(lp, ref, duals, params, y0=y0, u0=u0, gamma="tilde")
    return ref, duals, const


# ---------------------------------------------------------------- bound checks

def loglog_slope(k, v, kmin=1e2, kmax=1e4):
    """Least-squares slope of log v against log k over [kmin, kmax].

    Nonpositive entries are dropped; returns (slope, points used).
    """
    k = np.asarray(k, float)
    v = np.asarray(v, float)
    sel = (k >= kmin) & (k <= kmax) & (v > 0) & np.isfinite(v)
    if sel.sum() < 2:
        return None, int(sel.sum())
    return float(np.polyfit(np.log(k[sel]), np.log(v[sel]), 1)[0]), int(sel.sum())


@dataclass
class BoundReport:
    k: np.ndarray
    passed: dict                # bound name -> bool array over k
    slopes: dict
    advisory: bool = False

    @property
    def failures(self):
        return {name: int((~ok).sum()) for name, ok in self.passed.items()}

    @property
    def all_pass(self):
        return all(ok.all() for ok in self.passed.values())

    def as_dict(self):
        return {"iterations": int(len(self.k)), "failures": self.failures,
                "all_pass": self.all_pass, "slopes": self.slopes, "advisory": self.advisory}


def check_rate_bounds(series, const, kmin=1e2, kmax=1e4, rtol=1e-9):
    """Per-iteration checks of the feasibility and objective bounds.

    ``series`` is a metrics log (or a trajectory carrying one under
    ``records["metrics"]``) with columns k, G_avg_max, cons_avg, f_avg,
    ineq_viol_avg and eq_viol_avg.
    """
    if hasattr(series, "records"):
        series = series.records["metrics"]
    s = series.arrays() if hasattr(series, "arrays") else series
    k = np.asarray(s["k"], float)
    sel = k >= 1
    k = k[sel]
    col = {name: np.asarray(s[name], float)[sel] for name in
           ("G_avg_max", "cons_avg", "f_avg", "ineq_viol_avg", "eq_viol_avg")}
    b = const.bounds_at(k)
    slack = rtol * (1 + np.abs(col["f_avg"]))
    gap = col["f_avg"] - const.f_star
    passed = {
        "G_avg": col["G_avg_max"] <= b["G_avg"] + 1e-12,
        "consensus": col["cons_avg"] <= b["consensus"] + 1e-12,
        "f_upper": gap <= b["f_upper"] + slack,
        "f_lower": gap >= b["f_lower"] - slack,
        "sum_g": col["ineq_viol_avg"] <= b["sum_g"] + 1e-12,
        "eq": col["eq_viol_avg"] <= b["eq"] + 1e-12,
    }
    kk = np.asarray(s["k"], float)[sel]
    slopes = {}
    for name, v in (("ineq_viol_avg", np.maximum(0.0, col["ineq_viol_avg"])),
                    ("obj_gap_avg", np.abs(gap)), ("eq_viol_avg", col["eq_viol_avg"]),
                    ("cons_avg", col["cons_avg"])):
        slopes[name] = loglog_slope(kk, v, kmin, kmax)[0]
    return BoundReport(k=k, passed=passed, slopes=slopes, advisory=not const.theoretical_guarantee)
