"""Per-iteration metrics and invariant monitoring, attached to a run as a hook."""
from __future__ import annotations

import csv

import numpy as np

from .reference import w_norm

CSV_COLUMNS = ("k", "obj_err_iter", "obj_err_avg", "opt_dist_iter", "opt_dist_avg",
               "ineq_viol_avg", "eq_viol_avg", "q_norm", "u_drift")
# extra series used by the bound checks (not written to the CSV)
EXTRA_COLUMNS = ("f_iter", "f_avg", "G_avg_max", "cons_avg")
INVARIANTS = ("q_min", "qG_min", "q_minus_G_norm", "lemma1_err", "G_avg_minus_q", "z_sum")


class MetricsLog:
    def __init__(self):
        self.rows = {c: [] for c in CSV_COLUMNS + EXTRA_COLUMNS}
        self.inv = {c: [] for c in ("k",) + INVARIANTS}
        self.q0_excess = None   # |q^0| - |G(y^0)|

    def __len__(self):
        return len(self.rows["k"])

    def arrays(self):
        return {c: np.asarray(v, float) for c, v in self.rows.items()}

    def invariants(self):
        return {c: np.asarray(v, float) for c, v in self.inv.items()}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_COLUMNS)
            for r in range(len(self)):
                row = [self.rows["k"][r]]
                row += [repr(float(self.rows[c][r])) for c in CSV_COLUMNS[1:]]
                wr.writerow(row)


def read_metrics_csv(path):
    with open(path) as fh:
        rd = csv.reader(fh)
        header = next(rd)
        data = np.array([[float(v) for v in row] for row in rd])
    return header, data


class MetricsHook:
    """Record metrics after every iteration.

    ``ref`` supplies x* and f* (a :class:`ReferenceSolution`); without it the
    error columns are NaN. Invariant series are always recorded.
    """
    name = "metrics"

    def __init__(self, lp, ref=None, every=1):
        self.lp = lp
        self.ref = ref
        self.every = every
        self.records = MetricsLog()

    def __call__(self, state, lp, params):
        log = self.records
        rho, wp = params.rho, params.wp
        x, t = lp.split(state.y)
        ev = state.evals if state.evals is not None else lp.evaluate_x(x, derivatives=False)
        G = ev.g - t
        qn, Gn = np.linalg.norm(state.q), np.linalg.norm(G)
        if state.k == 0:
            log.q0_excess = float(qn - Gn)
        log.inv["k"].append(state.k)
        log.inv["q_min"].append(float(state.q.min()))
        log.inv["qG_min"].append(float((state.q + G).min()))
        log.inv["q_minus_G_norm"].append(float(qn - Gn) if state.k else np.inf)
        log.inv["z_sum"].append(float(np.linalg.norm(state.z.sum(axis=0))))
        if state.k == 0:
            log.inv["lemma1_err"].append(0.0)
            log.inv["G_avg_minus_q"].append(-np.inf)
            return False

        ybar = state.ybar
        xb, tb = lp.split(ybar)
        evb = lp.evaluate_x(xb, derivatives=False)
        cons = lp.consensus_residual(ybar)
        lhs = cons - rho / state.k * (state.u - state.u0).sum(axis=0)
        log.inv["lemma1_err"].append(float(np.linalg.norm(lhs) / (1 + np.linalg.norm(state.u))))
        Gb = evb.g - tb
        log.inv["G_avg_minus_q"].append(float((Gb - state.q / state.k).max()))
        if state.k % self.every:
            return False

        sum_g = evb.g.sum(axis=0)
        eq = cons[:lp.m]
        f_it, f_av = float(ev.f.sum()), float(evb.f.sum())
        r = log.rows
        r["k"].append(state.k)
        if self.ref is not None:
            xs, fs = self.ref.x_star, self.ref.f_star
            r["obj_err_iter"].append(abs(f_it - fs))
            r["obj_err_avg"].append(abs(f_av - fs))
            r["opt_dist_iter"].append(float(np.linalg.norm(x - xs)))
            r["opt_dist_avg"].append(float(np.linalg.norm(xb - xs)))
        else:
            for c in ("obj_err_iter", "obj_err_avg", "opt_dist_iter", "opt_dist_avg"):
                r[c].append(np.nan)
        r["ineq_viol_avg"].append(float(sum_g.max()))
        r["eq_viol_avg"].append(float(np.linalg.norm(eq)))
        r["q_norm"].append(float(qn))
        r["u_drift"].append(w_norm(wp.PW, state.u - state.u0))
        r["f_iter"].append(f_it)
        r["f_avg"].append(f_av)
        r["G_avg_max"].append(float(Gb.max()))
        r["cons_avg"].append(float(np.linalg.norm(cons)))
        return False


def invariant_summary(log, tol=1e-12):
    """Worst value of each monitored invariant and whether it holds."""
    inv = log.invariants()
    k = inv["k"]
    after = k >= 1
    out = {
        "q_nonneg": (float(inv["q_min"].min()), inv["q_min"].min() >= -tol),
        "q_plus_G_nonneg": (float(inv["qG_min"].min()), inv["qG_min"].min() >= -tol),
        "q0_le_G0": (log.q0_excess, log.q0_excess is not None and log.q0_excess <= tol),
        "q_ge_G": (float(inv["q_minus_G_norm"][after].min()) if after.any() else np.inf,
                   not after.any() or inv["q_minus_G_norm"][after].min() >= -tol),
        "lemma1": (float(inv["lemma1_err"].max()), inv["lemma1_err"].max() <= 1e-8),
        "G_avg_le_q_over_k": (float(inv["G_avg_minus_q"].max()),
                              inv["G_avg_minus_q"].max() <= 1e-10),
        "z_conservation": (float(inv["z_sum"].max()), inv["z_sum"].max() <= 1e-10),
    }
    return {name: (val, bool(ok)) for name, (val, ok) in out.items()}
