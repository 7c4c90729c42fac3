class KnitPlyError(ValueError):
    """
    Base class for data and invariant errors raised by the pipeline stages.

    :param message: Human readable description.
    :param stage: Name of the pipeline stage that failed (tile, plies, map, ...).
    """

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage

    def __repr__(self):
        return f"{self.__class__.__name__}(stage={self.stage}, message={self.args[0]!r})"


class ParseError(KnitPlyError):
    pass


class BadMagicError(ParseError):
    def __init__(self, path, expected, found, stage=None):
        super().__init__(f"bad magic in '{path}': expected {expected!r}, found {found!r}", stage)
        self.path = path


class InvariantError(KnitPlyError):
    pass


class NoPartnerError(InvariantError):
    pass


class AmbiguityError(InvariantError):
    pass


class TopologyError(InvariantError):
    pass


class DegenerateError(InvariantError):
    pass


class EmptyMeshError(InvariantError):
    pass


class DegenerateNormalError(InvariantError):
    pass


class OverlappingChartError(InvariantError):
    pass


class UnmappedUVError(InvariantError):
    def __init__(self, message, vertex_index=None, ply_index=None, stage=None):
        super().__init__(message, stage)
        self.vertex_index = vertex_index
        self.ply_index = ply_index


class BudgetExhausted(UserWarning):
    """
    Raised as a warning when the optimizer hits its evaluation budget.
    Carries the best parameters found so far and the loss trace.
    """

    def __init__(self, message, best_params=None, trace=None):
        super().__init__(message)
        self.best_params = best_params
        self.trace = trace
