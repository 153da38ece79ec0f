"""Exception hierarchy shared by all modules."""


class BlockRMTError(Exception):
    """Base class for every error raised by the package."""


class InputError(BlockRMTError, ValueError):
    """Malformed user input such as a bad coupling file or config entry.

    Parameters
    ----------
    message : str
        Human readable description.
    row, col : int, optional
        Location of the offending entry (1-based) for file inputs.
    """

    def __init__(self, message, row=None, col=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", column {col})" if col is not None else ")")
        super().__init__(message + loc)
        self.row = row
        self.col = col


class ArgumentError(BlockRMTError, ValueError):
    """Invalid argument combination (dimensions, D < 2, ...)."""


class SolverError(BlockRMTError, RuntimeError):
    """An iterative solver did not converge.

    Attributes
    ----------
    residual : float
        Last residual seen before giving up.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class BranchError(SolverError):
    """The self-consistent solution left the upper half plane."""


class SingularityError(SolverError):
    """A quantity is too close to a singular value (e.g. m near 0)."""


class DomainError(BlockRMTError, ValueError):
    """Parameters outside the range where a construction is defined."""


class NearSingularError(SolverError):
    """The D x D stability operator 1 - M_hat is numerically singular."""


class FlowError(SolverError):
    """The characteristic flow could not be continued.

    Attributes
    ----------
    partial : object
        Trajectory integrated up to the failure point.
    """

    def __init__(self, message, residual=float("nan"), partial=None):
        super().__init__(message, residual)
        self.partial = partial


class ConstructionError(BlockRMTError, RuntimeError):
    """A tabulated object (e.g. the Tracy-Widom table) failed sanity checks."""


class EnsembleError(BlockRMTError, RuntimeError):
    """Too many samples of a Monte Carlo run failed."""


class AccuracyWarning(UserWarning):
    """Result computed but with less accuracy than requested."""
