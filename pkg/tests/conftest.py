import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from coupledopt.algorithm import AlgoParams
from coupledopt.families import gen_coupled_quadratic, gen_linear_log
from coupledopt.graph import build_graph, build_weight_matrices, path_graph
from coupledopt.problem import CoupledProblem, NodeProblem, lift

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_params(problem, gamma=0.01, rho=1.0, max_iter=0, shrink=1.0):
    wp = build_weight_matrices(problem.graph, shrink=shrink)
    return AlgoParams(gamma=gamma, rho=rho, max_iter=max_iter, wp=wp)


def random_connected_edges(n, extra, rng):
    """Random spanning tree plus ``extra`` random chords (1-based pairs)."""
    perm = rng.permutation(n)
    edges = {tuple(sorted((int(perm[k]), int(perm[rng.integers(0, k)])))) for k in range(1, n)}
    for _ in range(extra):
        i, j = rng.choice(n, 2, replace=False)
        edges.add(tuple(sorted((int(i), int(j)))))
    return [(i + 1, j + 1) for i, j in sorted(edges)]


def one_node_problem(A=2.0, b=3.0):
    """n=1, d=1, p=1, m=1 with f = x, g = -log(1+x) + log 1.5 on [0, 1]."""
    nd = NodeProblem(dim=1, lower=[0.0], upper=[1.0],
                     f=lambda x: float(x[0]), grad_f=lambda x: np.array([1.0]),
                     g=lambda x: np.array([-np.log1p(x[0]) + np.log(1.5)]),
                     jac_g=lambda x: np.array([[-1.0 / (1.0 + x[0])]]),
                     A=np.array([[A]]), b=np.array([b]))
    return CoupledProblem(graph=build_graph(1, []), nodes=[nd], p=1, m=1)


@pytest.fixture
def quad10():
    """Criterion-1 style instance: n=10, d=2, p=2, m=2."""
    return gen_coupled_quadratic(10, d=2, m=2, p=2, seed=0)


@pytest.fixture
def linlog10():
    return gen_linear_log(10, seed=0)


@pytest.fixture
def chain3_linlog():
    return gen_linear_log(3, seed=0, graph=path_graph(3))


@pytest.fixture
def lifted(quad10):
    return lift(quad10)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = {}     # criterion number -> (passed, detail)


def record(num, passed, detail):
    ACCEPTANCE[num] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        tr.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
