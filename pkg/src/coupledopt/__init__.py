"""Decentralized projected primal-dual optimization with virtual queues."""
__version__ = "0.1.0"

from .algorithm import AlgoParams, AlgoState, Trajectory, compute_d_local, compute_d_stacked, \
    init_state, run, step_stacked
from .errors import *  # noqa: F401,F403
from .families import gen_coupled_quadratic, gen_linear_log, load_problem, save_problem
from .graph import Graph, WeightPair, build_graph, build_weight_matrices, validate_assumption2
from .metrics import CSV_COLUMNS, MetricsHook, invariant_summary
from .network import CommunicationAudit, Simulator
from .problem import CoupledProblem, LiftedProblem, NodeProblem, estimate_lipschitz, lift
from .reference import RateConstants, check_rate_bounds, compute_constants, estimate_dual, \
    solve_reference, theoretical_pipeline
