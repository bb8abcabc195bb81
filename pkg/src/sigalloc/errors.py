"""Exception hierarchy shared by every module.

The CLI prints the class name of the raised error, so names are part of the
public interface.
"""


class SigallocError(Exception):
    """Base class for all library errors."""


# sigcore
class InvalidPath(SigallocError, ValueError):
    pass


class UnsupportedLevel(SigallocError, ValueError):
    pass


class GridMismatch(SigallocError, ValueError):
    pass


class DegenerateLeadLag(SigallocError, ValueError):
    pass


# autodiff / model
class ShapeError(SigallocError, ValueError):
    pass


class NotScalar(SigallocError, ValueError):
    pass


# objective
class EmptyScenario(SigallocError, ValueError):
    pass


class EmptyBatch(SigallocError, ValueError):
    pass


class PreconditionFailed(SigallocError, ValueError):
    pass


# baselines
class EmptyPortfolio(SigallocError, ValueError):
    pass


class InvalidCov(SigallocError, ValueError):
    pass


# market
class FormatError(SigallocError, ValueError):
    pass


class InsufficientHistory(SigallocError, ValueError):
    pass


class InvalidConfig(SigallocError, ValueError):
    pass


# backtest
class StrategyViolation(SigallocError, ValueError):
    pass
