import numpy as np
import pytest
from hypothesis import given, strategies as st

from coupledopt import _kernels
from coupledopt.algorithm import (AlgoParams, LocalView, augmented_value, compute_d_local,
                                  compute_d_stacked, cross_terms, init_state, run, step_stacked)
from coupledopt.errors import ConfigError, MissingNeighborMessage
from coupledopt.families import gen_coupled_quadratic, gen_linear_log
from coupledopt.graph import build_graph, path_graph
from coupledopt.metrics import MetricsHook, invariant_summary
from coupledopt.problem import CoupledProblem, NodeProblem, central_gradient, lift

from conftest import make_params, one_node_problem


def advance(lp, params, k, y0=None, u0=None):
    st_ = init_state(lp, params, y0, u0)
    for _ in range(k):
        st_ = step_stacked(lp, st_, params)
    return st_


def local_inbox(lp, state, params, i):
    """Messages node i would hold, built from a stacked state."""
    pb = lp.problem
    x, t = lp.split(state.y)
    ev = lp.evaluate_x(x, derivatives=False)
    w = state.q + ev.g - t
    sources = tuple(j for j in pb.graph.neighbors[i] if i in pb.nodes[j].scope)
    cross = {j: cross_terms(pb.nodes[j], pb.scope_slices(j), lp.gather_scope(x, j), w[j])[i]
             for j in sources}
    u_in = {j: state.u[j] for j in pb.graph.neighbors[i]}
    view = LocalView(i=i, neighbors=pb.graph.neighbors[i], sources=sources,
                     pw_row={j: params.wp.PW[i, j] for j in pb.graph.neighbors[i]},
                     Abar=lp.Abar[i], b=lp.b[i], x=lp.x_block(x, i), t=t[i], q=state.q[i],
                     z=state.z[i], g=ev.g[i], rho=params.rho, round=state.k)
    return view, {"u": u_in, "cross": cross}


def test_params_validation(quad10):
    wp = make_params(quad10).wp
    for g, r in ((0.0, 1.0), (1.0, 0.0), (-1.0, 1.0), (np.nan, 1.0)):
        with pytest.raises(ConfigError):
            AlgoParams(gamma=g, rho=r, max_iter=1, wp=wp)


def test_init_defaults(lifted, quad10):
    params = make_params(quad10)
    st_ = init_state(lifted, params)
    assert not np.any(st_.z) and not np.any(st_.u)
    np.testing.assert_array_equal(st_.y, lifted.project_Y(np.zeros(lifted.N)))
    assert st_.k == 0 and st_.ybar is None


def test_init_q_from_G():
    g = build_graph(2, [(1, 2)])
    vals = (-1.0, 2.0)
    nodes = [NodeProblem(dim=1, lower=[0.0], upper=[1.0], f=lambda x: 0.0,
                         grad_f=lambda x: np.zeros(1), g=(lambda v: lambda x: np.array([v]))(v),
                         jac_g=lambda x: np.zeros((1, 1)), scope=(i,))
             for i, v in enumerate(vals)]
    pb = CoupledProblem(graph=g, nodes=nodes, p=1, m=1)
    st_ = init_state(lift(pb), make_params(pb))
    np.testing.assert_array_equal(st_.q.ravel(), [1.0, 0.0])


def test_init_projects_y0(lifted, quad10):
    y0 = np.full(lifted.N, 10.0)
    with pytest.warns(UserWarning):
        st_ = init_state(lifted, make_params(quad10), y0=y0)
    assert np.all(lifted.split(st_.y)[0] <= lifted.upper)


def test_zero_problem_direction():
    g = path_graph(3)
    nodes = [NodeProblem(dim=2, lower=[-1, -1], upper=[1, 1], f=lambda x: 0.0,
                         grad_f=lambda x: np.zeros(len(x)), g=lambda x: np.zeros(1),
                         jac_g=lambda x: np.zeros((1, len(x)))) for _ in range(3)]
    pb = CoupledProblem(graph=g, nodes=nodes, p=1, m=2)
    lp = lift(pb)
    y = lp.join(np.random.default_rng(0).uniform(-1, 1, lp.nx), np.zeros((3, 1)))
    st_ = init_state(lp, make_params(pb), y0=y)
    assert not np.any(compute_d_stacked(lp, st_, make_params(pb)))


@pytest.mark.parametrize("k", [0, 7, 60])
def test_direction_matches_fd_of_R(quad10, k):
    lp = lift(quad10)
    params = make_params(quad10, gamma=0.01, rho=0.8)
    st_ = advance(lp, params, k)
    d = compute_d_stacked(lp, st_, params)
    fd = central_gradient(lambda v: augmented_value(lp, st_, params, v), st_.y)
    assert np.linalg.norm(d - fd) / np.linalg.norm(fd) <= 1e-6


def test_three_node_hand_coordinate(chain3_linlog):
    lp = lift(chain3_linlog)
    params = make_params(chain3_linlog, gamma=0.05, rho=1.0)
    rng = np.random.default_rng(0)
    st_ = advance(lp, params, 5, u0=rng.standard_normal((3, 2)))
    d = compute_d_stacked(lp, st_, params)
    c1, d1 = chain3_linlog.meta["c"][0], chain3_linlog.meta["d"][0]
    x, t = lp.split(st_.y)
    G1 = -d1 * np.log1p(x[0]) + chain3_linlog.meta["b"] / 3 - t[0, 0]
    # equality data are zero, so only the objective and queue terms survive
    expect = c1 + (st_.q[0, 0] + G1) * (-d1 / (1 + x[0]))
    assert d[lp.x_pos[0]] == pytest.approx(expect, rel=1e-13)


def test_queue_update_arithmetic(lifted, quad10):
    params = make_params(quad10)
    st0 = advance(lifted, params, 3)
    st1 = step_stacked(lifted, st0, params)
    np.testing.assert_array_equal(st1.q, np.maximum(-st1.G, st0.q + st1.G))
    # hand example: q = 2, G = -3 gives 3
    assert np.maximum(3.0, 2.0 - 3.0) == 3.0


def test_z_sum_conserved(lifted, quad10):
    params = make_params(quad10, rho=0.8)
    st_ = advance(lifted, params, 0, u0=np.random.default_rng(2).standard_normal((10, 4)))
    for _ in range(50):
        st_ = step_stacked(lifted, st_, params)
        assert np.linalg.norm(st_.z.sum(axis=0)) <= 1e-10


def test_fixed_point_one_node():
    pb = one_node_problem(A=0.0, b=0.0)
    lp = lift(pb)
    params = make_params(pb, gamma=0.2, rho=1.0)
    st_ = advance(lp, params, 4000)
    nxt = step_stacked(lp, st_, params)
    assert np.abs(nxt.y - st_.y).max() <= 1e-8
    assert lp.split(st_.y)[0][0] == pytest.approx(0.5, abs=1e-6)


def test_max_iter_zero(lifted, quad10):
    traj = run(lifted, make_params(quad10, max_iter=0))
    assert traj.k == 0 and traj.ybar is None


def test_unknown_engine(lifted, quad10):
    with pytest.raises(ConfigError):
        run(lifted, make_params(quad10, max_iter=1), engine="async")


def test_local_direction_single_node():
    pb = one_node_problem()
    lp = lift(pb)
    params = make_params(pb)
    st_ = advance(lp, params, 3, u0=np.array([[0.3, -0.2]]))
    view, inbox = local_inbox(lp, st_, params, 0)
    np.testing.assert_allclose(compute_d_local(0, view, inbox),
                               compute_d_stacked(lp, st_, params), rtol=0, atol=1e-15)


@given(seed=st.integers(0, 1000), k=st.integers(0, 20))
def test_local_directions_concatenate_to_stacked(seed, k):
    pb = gen_coupled_quadratic(10, seed=seed, p=2)
    lp = lift(pb)
    params = make_params(pb, gamma=0.01, rho=0.8)
    st_ = advance(lp, params, k, u0=np.random.default_rng(seed).standard_normal((10, 4)))
    d = compute_d_stacked(lp, st_, params)
    parts = [compute_d_local(i, *local_inbox(lp, st_, params, i)) for i in range(lp.n)]
    assert np.abs(np.concatenate(parts) - d).max() <= 1e-12


def test_missing_u_message(quad10):
    lp = lift(quad10)
    params = make_params(quad10)
    st_ = init_state(lp, params)
    view, inbox = local_inbox(lp, st_, params, 0)
    dropped = view.neighbors[-1]
    del inbox["u"][dropped]
    with pytest.raises(MissingNeighborMessage) as exc:
        compute_d_local(0, view, inbox)
    assert str(dropped + 1) in str(exc.value)


@pytest.mark.parametrize("make,gamma,rho", [
    (lambda: gen_coupled_quadratic(10, seed=1, p=2), 0.01, 0.8),
    (lambda: gen_linear_log(10, seed=1), 0.1, 1.0),
])
def test_invariants_along_run(make, gamma, rho):
    pb = make()
    lp = lift(pb)
    params = make_params(pb, gamma=gamma, rho=rho, max_iter=1500)
    hook = MetricsHook(lp)

    def feasible(state, lp_, params_):
        x = lp.split(state.y)[0]
        assert np.all(x >= lp.lower) and np.all(x <= lp.upper)

    run(lp, params, hooks=(hook, feasible))
    summary = invariant_summary(hook.records)
    bad = {k: v for k, v in summary.items() if not v[1]}
    assert not bad


def test_gradient_consistency_every_100(quad10):
    lp = lift(quad10)
    params = make_params(quad10, gamma=0.01, rho=0.8, max_iter=500)
    worst = []

    def check(state, lp_, params_):
        if state.k % 100 == 0:
            d = compute_d_stacked(lp, state, params)
            fd = central_gradient(lambda v: augmented_value(lp, state, params, v), state.y)
            worst.append(np.linalg.norm(d - fd) / np.linalg.norm(fd))

    run(lp, params, hooks=(check,))
    assert len(worst) == 6 and max(worst) <= 1e-5


def test_backends_agree(quad10):
    if not _kernels.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    lp = lift(quad10)
    params = make_params(quad10, gamma=0.01, rho=0.8, max_iter=100)
    old = _kernels.backend()
    try:
        ys = {}
        for b in ("numpy", "numba"):
            _kernels.set_backend(b)
            ys[b] = run(lp, params).state.y
    finally:
        _kernels.set_backend(old)
    assert np.abs(ys["numpy"] - ys["numba"]).max() <= 1e-12


def test_history_and_early_stop(lifted, quad10):
    params = make_params(quad10, max_iter=50)
    traj = run(lifted, params, hooks=(lambda s, lp, p: s.k >= 10,), keep_history=True)
    assert traj.k == 10 and len(traj.history) == 11
    assert [s.k for s in traj.history] == list(range(11))
    np.testing.assert_allclose(traj.ybar, np.mean([s.y for s in traj.history[1:]], axis=0))
