"""Exception hierarchy shared by every module of the package."""


class NowcastError(Exception):
    """Base class for all package errors."""


class DataError(NowcastError):
    pass


class ParseError(DataError):
    """A CSV row could not be parsed. ``row`` is the 1-based data row index."""

    def __init__(self, row: int, message: str = ""):
        self.row = row
        super().__init__(f"row {row}: {message}" if message else f"row {row}")


class EmptyDataset(DataError):
    pass


class InvalidFraction(DataError):
    pass


class MaskInfeasible(DataError):
    pass


class GridMismatch(NowcastError):
    pass


class NodeSetMismatch(NowcastError):
    pass


class ShapeMismatch(NowcastError):
    pass


class NonFiniteLoss(NowcastError):
    def __init__(self, iteration: int, value: float):
        self.iteration = iteration
        self.value = value
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")


class EmptyObservation(NowcastError):
    pass


class DegenerateGeometry(NowcastError):
    pass


class SingularKernel(NowcastError):
    pass


class ConfigError(NowcastError):
    pass


class RankDeficientWarning(UserWarning):
    """Fewer non-zero covariance eigenvalues than requested components."""
