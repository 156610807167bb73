"""Exception classes raised across the package."""


class CoupledOptError(Exception):
    """Base class for all package errors."""


# graph construction

class GraphError(CoupledOptError, ValueError):
    pass


class DisconnectedGraph(GraphError):
    pass


class SelfLoopInEdgeList(GraphError):
    pass


class IndexOutOfRange(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class InvalidShrink(GraphError):
    pass


class NonPositiveDiagonal(GraphError):
    pass


# problem data and evaluation

class ShapeMismatch(CoupledOptError, ValueError):
    pass


class DimensionMismatch(CoupledOptError, ValueError):
    pass


class NonFiniteValue(CoupledOptError, FloatingPointError):
    """A user callback produced NaN or Inf."""

    def __init__(self, node, what):
        self.node = node
        self.what = what
        super().__init__(f"non-finite {what} at node {node + 1}")


class Infeasible(CoupledOptError):
    pass


# message passing

class MissingNeighborMessage(CoupledOptError, KeyError):
    def __init__(self, node, neighbor, round_, phase=None):
        self.node, self.neighbor, self.round, self.phase = node, neighbor, round_, phase
        where = f" in phase {phase!r}" if phase else ""
        super().__init__(
            f"node {node + 1} has no message from neighbor {neighbor + 1} "
            f"for round {round_}{where}")

    def __str__(self):
        return self.args[0]


class LocalityViolation(CoupledOptError, RuntimeError):
    pass


# reference oracle

class BudgetExhausted(CoupledOptError, RuntimeError):
    pass


class NoSlaterPoint(CoupledOptError):
    pass


class RankDeficientAmbiguous(CoupledOptError):
    pass


class NegativeC(CoupledOptError):
    pass


class ConfigError(CoupledOptError, ValueError):
    pass
