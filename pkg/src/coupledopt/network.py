"""Synchronous-round message passing for the decentralized engine.

Every node is an actor that sees only its own slice of the state and the
messages delivered to it. Messages sent during a phase are delivered at the
phase barrier. Actors reach the network only through a :class:`Port`, which
refuses sends to non-neighbors and audits every read of foreign state.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .algorithm import AlgoState, LocalView, compute_d_local, cross_terms
from .errors import LocalityViolation, MissingNeighborMessage

PHASES = ("setup", "x-u-exchange", "cross-term", "post-primal-x", "post-dual-u")


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    round: int
    phase: str
    kind: str
    payload: np.ndarray

    @property
    def scalars(self):
        return int(np.size(self.payload))


@dataclass
class CommunicationAudit:
    rows: list = field(default_factory=list)   # (round, phase, messages, scalars)
    nonlocal_accesses: int = 0
    local_reads: int = 0

    def per_round(self):
        tot = defaultdict(lambda: [0, 0])
        for r, _, msgs, sc in self.rows:
            tot[r][0] += msgs
            tot[r][1] += sc
        return {r: tuple(v) for r, v in sorted(tot.items())}

    def per_phase(self, phase):
        return [(r, msgs, sc) for r, ph, msgs, sc in self.rows if ph == phase]

    def total(self, phase=None):
        rows = [r for r in self.rows if phase is None or r[1] == phase]
        return sum(r[2] for r in rows), sum(r[3] for r in rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["round", "phase", "messages", "scalars"])
            wr.writerows(self.rows)


class Port:
    """An actor's only handle on the network."""

    def __init__(self, net, owner):
        self._net = net
        self.owner = owner

    def send(self, dst, phase, kind, payload):
        self._net._post(self.owner, dst, phase, kind, payload)

    def inbox(self, phase, kind):
        return self._net._inbox(self.owner, phase, kind)

    def read_state(self, other, attr):
        """Direct read of another actor's state; only neighbors are allowed."""
        return self._net._read(self.owner, other, attr)


class NodeActor:
    """Holds y_i = (x_i, t_i), q_i, u_i, z_i and runs the per-node updates."""

    def __init__(self, i, lp, params, port, x0, t0, u0):
        pb = lp.problem
        self.i = i
        self.port = port
        self.node = pb.nodes[i]
        self.neighbors = pb.graph.neighbors[i]
        self.scope = self.node.scope
        self.slices = pb.scope_slices(i)
        # nodes whose local functions read x_i: they need x_i and send back cross terms
        self.x_subscribers = tuple(j for j in self.neighbors
                                   if j != i and i in pb.nodes[j].scope)
        self.cross_sources = tuple(sorted(set(self.x_subscribers) | {i}))
        self.pw_row = {j: params.wp.PW[i, j] for j in self.neighbors}
        self.ph_row = {j: params.wp.PH[i, j] for j in self.neighbors}
        self.gamma, self.rho = params.gamma, params.rho
        self.m, self.p = lp.m, lp.p
        self.lower, self.upper = self.node.lower, self.node.upper
        self.b = self.node.b
        self.x = np.array(x0, float)
        self.t = np.array(t0, float)
        self.u = np.array(u0, float)
        self.q = self.z = self.Abar = None
        self.ybar_sum = np.zeros(len(self.x) + self.p)
        self.k = 0

    # ---- helpers
    def _scope_x(self, phase):
        xs = self.port.inbox(phase, "x")
        parts = []
        for j in self.scope:
            if j == self.i:
                parts.append(self.x)
            elif j in xs:
                parts.append(xs[j])
            else:
                raise MissingNeighborMessage(self.i, j, self.k, phase)
        return np.concatenate(parts)

    def _gathered(self, phase, kind, sources):
        box = self.port.inbox(phase, kind)
        for j in sources:
            if j != self.i and j not in box:
                raise MissingNeighborMessage(self.i, j, self.k, phase)
        return box

    # ---- setup (initialization line)
    def setup_send(self):
        for j, sl in self.slices.items():
            if j != self.i:
                self.port.send(j, "setup", "A", self.node.A[:, sl])
        for j in self.x_subscribers:
            self.port.send(j, "x-u-exchange", "x", self.x)
        for j in self.neighbors:
            if j != self.i:
                self.port.send(j, "x-u-exchange", "u", self.u)

    def setup_finish(self):
        a_in = self._gathered("setup", "A", self.x_subscribers)
        Abar = self.node.A[:, self.slices[self.i]].copy()
        for j in self.x_subscribers:
            Abar = Abar + a_in[j]
        self.Abar = Abar
        u_in = self._gathered("x-u-exchange", "u", self.neighbors)
        self.z = self.rho * self._mix(self.ph_row, u_in, self.u)
        g = np.asarray(self.node.g(self._scope_x("x-u-exchange")), float).ravel()
        self.G = g - self.t
        self.q = np.maximum(-self.G, 0.0)

    def _mix(self, row, box, own):
        acc = None
        for j in self.neighbors:
            v = own if j == self.i else box[j]
            term = row[j] * v
            acc = term if acc is None else acc + term
        return acc

    # ---- iteration phases
    def cross_phase(self, x_phase):
        xs = self._scope_x(x_phase)
        self._g = np.asarray(self.node.g(xs), float).ravel()
        w = self.q + self._g - self.t
        terms = cross_terms(self.node, self.slices, xs, w)
        self._own_cross = terms[self.i]
        for j in self.scope:
            if j != self.i:
                self.port.send(j, "cross-term", "cross", terms[j])

    def primal_phase(self, u_phase):
        u_box = dict(self._gathered(u_phase, "u", self.neighbors))
        u_box[self.i] = self.u
        cross = dict(self._gathered("cross-term", "cross", self.x_subscribers))
        cross[self.i] = self._own_cross
        local = LocalView(i=self.i, neighbors=self.neighbors, sources=self.cross_sources,
                          pw_row=self.pw_row, Abar=self.Abar, b=self.b, x=self.x, t=self.t,
                          q=self.q, z=self.z, g=self._g, rho=self.rho, round=self.k)
        d = compute_d_local(self.i, local, {"u": u_box, "cross": cross})
        dx = len(self.x)
        self.x = np.clip(self.x - self.gamma * d[:dx], self.lower, self.upper)
        self.t = self.t - self.gamma * d[dx:]
        self._u_mix = self._mix(self.pw_row, u_box, self.u)
        for j in self.x_subscribers:
            self.port.send(j, "post-primal-x", "x", self.x)

    def dual_phase(self):
        g = np.asarray(self.node.g(self._scope_x("post-primal-x")), float).ravel()
        G = g - self.t
        self.q = np.maximum(-G, self.q + G)
        r = np.concatenate([self.Abar @ self.x - self.b, self.t])
        self.u = self._u_mix + (r - self.z) / self.rho
        self.G = G
        for j in self.neighbors:
            if j != self.i:
                self.port.send(j, "post-dual-u", "u", self.u)

    def z_phase(self):
        u_in = self._gathered("post-dual-u", "u", self.neighbors)
        self.z = self.z + self.rho * self._mix(self.ph_row, u_in, self.u)
        self.k += 1
        self.ybar_sum = self.ybar_sum + np.concatenate([self.x, self.t])


class Simulator:
    """Runs the actors in lock step and keeps the communication audit."""

    def __init__(self, lp, params, y0=None, u0=None, actor_factory=None):
        self.lp, self.params = lp, params
        self.graph = lp.problem.graph
        if y0 is None:
            y0 = lp.project_Y(np.zeros(lp.N))
        y0 = lp.project_Y(np.asarray(y0, float))
        u0 = np.zeros((lp.n, lp.m + lp.p)) if u0 is None else \
            np.asarray(u0, float).reshape(lp.n, lp.m + lp.p)
        self.u0 = u0.copy()
        x0, t0 = lp.split(y0)
        factory = actor_factory or NodeActor
        self.actors = [factory(i, lp, params, Port(self, i), lp.x_block(x0, i), t0[i], u0[i])
                       for i in range(lp.n)]
        self.audit = CommunicationAudit()
        self._pending = []
        self._boxes = defaultdict(dict)     # (dst, phase, kind) -> {src: payload}
        self._round = 0
        self.k = 0
        # no-coupling fast path: declared by the problem, so the cross-term and
        # x-broadcast phases are skipped outright
        self.fast_path = not lp.problem.coupled

    # ---- port backends
    def _post(self, src, dst, phase, kind, payload):
        if dst == src or not self.graph.is_neighbor(src, dst):
            self.audit.nonlocal_accesses += 1
            raise LocalityViolation(f"node {src + 1} tried to message non-neighbor {dst + 1}")
        self._pending.append(Message(src, dst, self._round, phase, kind,
                                     np.array(payload, float, copy=True)))

    def _inbox(self, owner, phase, kind):
        return self._boxes.get((owner, phase, kind), {})

    def _read(self, owner, other, attr):
        if not self.graph.is_neighbor(owner, other):
            self.audit.nonlocal_accesses += 1
            raise LocalityViolation(
                f"node {owner + 1} read {attr!r} of non-neighbor {other + 1}")
        self.audit.local_reads += 1
        return np.array(getattr(self.actors[other], attr), copy=True)

    def _barrier(self, phases):
        """Deliver everything sent since the last barrier, replacing old mail."""
        counts = {ph: [0, 0] for ph in phases}
        fresh = defaultdict(dict)
        for msg in self._pending:
            fresh[(msg.dst, msg.phase, msg.kind)][msg.src] = msg.payload
            counts[msg.phase][0] += 1
            counts[msg.phase][1] += msg.scalars
        for key in list(self._boxes):
            if key[1] in phases:
                del self._boxes[key]
        self._boxes.update(fresh)
        self._pending = []
        for ph in phases:
            self.audit.rows.append((self._round, ph, counts[ph][0], counts[ph][1]))

    # ---- rounds
    def setup_round(self):
        self._round = 0
        for a in self.actors:
            a.setup_send()
        self._barrier(("setup", "x-u-exchange"))
        for a in self.actors:
            a.setup_finish()
        self._x_phase, self._u_phase = "x-u-exchange", "x-u-exchange"

    def iteration_round(self):
        self._round = self.k + 1
        for a in self.actors:
            a.cross_phase(self._x_phase)
        if not self.fast_path:
            self._barrier(("cross-term",))
        for a in self.actors:
            a.primal_phase(self._u_phase)
        if not self.fast_path:
            self._barrier(("post-primal-x",))
        for a in self.actors:
            a.dual_phase()
        self._barrier(("post-dual-u",))
        for a in self.actors:
            a.z_phase()
        self._x_phase, self._u_phase = "post-primal-x", "post-dual-u"
        self.k += 1

    def global_state(self):
        """Concatenate the actors' slices (an observer's view, not a node's)."""
        lp = self.lp
        x = np.concatenate([a.x for a in self.actors])
        t = np.array([a.t for a in self.actors])
        y = lp.join(x, t)
        ybar_sum = np.empty(lp.N)
        for i, a in enumerate(self.actors):
            ybar_sum[lp.y_off[i]:lp.y_off[i + 1]] = a.ybar_sum
        G = np.array([a.G for a in self.actors])
        return AlgoState(k=self.k, y=y, q=np.array([a.q for a in self.actors]),
                         u=np.array([a.u for a in self.actors]),
                         z=np.array([a.z for a in self.actors]),
                         ybar_sum=ybar_sum, G=G, u0=self.u0, evals=None)

    def audit_report(self):
        return self.audit
