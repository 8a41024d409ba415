"""Exception types raised across gmmlab."""


class GmmLabError(Exception):
    """Base class for all library errors."""


class InvalidArgument(GmmLabError, ValueError):
    """An argument has the wrong shape, dimension or range."""


class InvalidModel(GmmLabError, ValueError):
    """A mixture model violates its invariants (e.g. all weights zero)."""


class UnsupportedMode(GmmLabError, ValueError):
    """The requested estimator mode cannot evaluate this quantity."""


class SandwichUnavailable(GmmLabError, ValueError):
    """The loss sandwich needs every partition group to be non-empty."""


class WhiteningFailed(GmmLabError, ValueError):
    """M2* has lower rank than the number of truth components."""

    def __init__(self, rank: int, expected: int):
        super().__init__(f"second moment has rank {rank}, expected {expected}")
        self.rank = rank
        self.expected = expected


class NumericalAbort(GmmLabError, FloatingPointError):
    """Training produced a non-finite loss or gradient.

    ``trajectory`` holds the snapshots recorded before the failure, ending with
    the offending state.
    """

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory
