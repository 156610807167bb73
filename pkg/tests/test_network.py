import numpy as np
import pytest

from coupledopt.algorithm import run
from coupledopt.errors import LocalityViolation, MissingNeighborMessage
from coupledopt.families import gen_coupled_quadratic, gen_linear_log
from coupledopt.graph import build_graph, path_graph
from coupledopt.network import NodeActor, Simulator
from coupledopt.problem import lift

from conftest import make_params, one_node_problem


def trajectories(lp, params, **kw):
    a = run(lp, params, engine="stacked", keep_history=True, **kw)
    b = run(lp, params, engine="decentralized", keep_history=True, audit=True, **kw)
    return a, b


def sup_gap(a, b):
    gap = 0.0
    for sa, sb in zip(a.history, b.history):
        for name in ("y", "q", "u", "z"):
            gap = max(gap, np.abs(getattr(sa, name) - getattr(sb, name)).max())
    return gap


@pytest.mark.parametrize("seed", [0, 1])
def test_engines_agree(seed):
    pb = gen_coupled_quadratic(8, seed=seed, p=2)
    lp = lift(pb)
    params = make_params(pb, gamma=0.01, rho=0.8, max_iter=60)
    u0 = np.random.default_rng(seed).standard_normal((8, 4))
    a, b = trajectories(lp, params, u0=u0)
    assert len(a.history) == len(b.history) == 61
    assert sup_gap(a, b) <= 1e-12
    assert b.audit.nonlocal_accesses == 0


def test_engines_agree_linear_log():
    pb = gen_linear_log(12, seed=3)
    lp = lift(pb)
    a, b = trajectories(lp, make_params(pb, gamma=0.1, rho=1.0, max_iter=80))
    assert sup_gap(a, b) <= 1e-12


def test_one_round_equals_one_step(quad10):
    lp = lift(quad10)
    params = make_params(quad10, gamma=0.01, rho=0.8, max_iter=1)
    a, b = trajectories(lp, params)
    for name in ("y", "q", "u", "z", "ybar_sum"):
        assert np.abs(getattr(a.state, name) - getattr(b.state, name)).max() <= 1e-12


def test_deterministic(quad10):
    lp = lift(quad10)
    params = make_params(quad10, gamma=0.01, rho=0.8, max_iter=30)
    y1 = run(lp, params, engine="decentralized").state.y
    y2 = run(lp, params, engine="decentralized").state.y
    assert np.array_equal(y1, y2)


class Snooper(NodeActor):
    """Faulty actor: node 1 peeks at the x of a node it is not adjacent to."""

    def cross_phase(self, x_phase):
        if self.i == 0:
            self.port.read_state(2, "x")
        super().cross_phase(x_phase)


class Shouter(NodeActor):
    def dual_phase(self):
        super().dual_phase()
        if self.i == 0:
            self.port.send(2, "post-dual-u", "u", self.u)


class Mute(NodeActor):
    def setup_send(self):
        if self.i != 0:
            super().setup_send()


@pytest.mark.parametrize("actor,err", [(Snooper, LocalityViolation),
                                       (Shouter, LocalityViolation),
                                       (Mute, MissingNeighborMessage)])
def test_faulty_actors(actor, err):
    pb = gen_coupled_quadratic(3, seed=0, graph=path_graph(3))
    lp = lift(pb)
    sim = Simulator(lp, make_params(pb, max_iter=2), actor_factory=actor)
    with pytest.raises(err):
        sim.setup_round()
        sim.iteration_round()
    if err is LocalityViolation:
        assert sim.audit.nonlocal_accesses == 1


def test_neighbor_reads_allowed():
    pb = gen_coupled_quadratic(3, seed=0, graph=path_graph(3))
    sim = Simulator(lift(pb), make_params(pb))
    port = sim.actors[0].port
    np.testing.assert_array_equal(port.read_state(1, "x"), sim.actors[1].x)
    assert sim.audit.local_reads == 1 and sim.audit.nonlocal_accesses == 0


def test_two_node_message_counts():
    # d = 2, m = 2, p = 1: A-blocks 4 scalars, x 2, cross terms 2, u 3
    pb = gen_coupled_quadratic(2, d=2, m=2, p=1, seed=0, graph=build_graph(2, [(1, 2)]))
    lp = lift(pb)
    traj = run(lp, make_params(pb, max_iter=3), engine="decentralized", audit=True)
    audit = traj.audit
    assert audit.per_phase("setup") == [(0, 2, 8)]
    assert audit.per_phase("x-u-exchange") == [(0, 4, 10)]
    for k in (1, 2, 3):
        assert (k, 2, 4) in audit.per_phase("cross-term")
        assert (k, 2, 4) in audit.per_phase("post-primal-x")
        assert (k, 2, 6) in audit.per_phase("post-dual-u")
    assert audit.per_round()[2] == (6, 14)
    assert audit.nonlocal_accesses == 0


def test_single_node_sends_nothing():
    pb = one_node_problem()
    lp = lift(pb)
    u0 = np.array([[0.4, -1.0]])
    params = make_params(pb, rho=2.0, max_iter=5)
    sim = Simulator(lp, params, u0=u0)
    sim.setup_round()
    np.testing.assert_array_equal(sim.actors[0].z, 2.0 * params.wp.PH[0, 0] * u0[0])
    for _ in range(5):
        sim.iteration_round()
    assert sim.audit.total() == (0, 0)


def test_fast_path_on_linear_log():
    pb = gen_linear_log(50, seed=7)
    lp = lift(pb)
    traj = run(lp, make_params(pb, gamma=0.1, rho=1.0, max_iter=20), engine="decentralized",
               audit=True)
    audit = traj.audit
    assert audit.total("cross-term") == (0, 0)
    assert audit.total("post-primal-x") == (0, 0)
    E = len(pb.graph.edges)
    rounds = audit.per_round()
    per_k = [rounds[k] for k in range(1, 21)]
    assert all(v == (2 * E, 2 * E * 2) for v in per_k)   # u blocks have m+p = 2 entries
    assert audit.nonlocal_accesses == 0


def test_coupled_broadcast_counts(quad10):
    lp = lift(quad10)
    traj = run(lp, make_params(quad10, max_iter=4), engine="decentralized", audit=True)
    E = len(quad10.graph.edges)
    for phase in ("cross-term", "post-primal-x", "post-dual-u"):
        assert all(msgs == 2 * E for _, msgs, _ in traj.audit.per_phase(phase))
    sc = {k: v[1] for k, v in traj.audit.per_round().items() if k >= 1}
    assert len(set(sc.values())) == 1


def test_stacked_has_no_audit(quad10):
    assert run(lift(quad10), make_params(quad10, max_iter=2), audit=True).audit is None


def test_audit_csv(tmp_path, quad10):
    traj = run(lift(quad10), make_params(quad10, max_iter=2), engine="decentralized",
               audit=True)
    path = tmp_path / "audit.csv"
    traj.audit.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "round,phase,messages,scalars"
    assert len(lines) == 1 + len(traj.audit.rows)
