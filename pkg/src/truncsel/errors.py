"""Exception hierarchy shared across the package.

Every error raised by truncsel derives from :class:`TruncselError`, so callers
can catch the whole family with one clause.  Validation errors carry enough
context (row, column, value) to locate the offending cell.
"""


class TruncselError(Exception):
    """Base class for all truncsel errors."""


# --- data / IO ---------------------------------------------------------------

class MissingColumn(TruncselError):
    def __init__(self, column, path=None):
        self.column = column
        self.path = path
        super().__init__(f"missing column {column!r}" + (f" in {path}" if path else ""))


class NonNumericCell(TruncselError):
    def __init__(self, row, column, value):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"non-numeric value {value!r} at row {row}, column {column!r}")


class OutOfRangeCategory(TruncselError):
    def __init__(self, row, column, value, allowed):
        self.row, self.column, self.value = row, column, value
        super().__init__(
            f"category code {value!r} at row {row}, column {column!r} outside {allowed}"
        )


class IoError(TruncselError):
    """File could not be written or read."""


# --- latent class analysis ----------------------------------------------------

class NonFiniteInput(TruncselError):
    pass


class DegenerateRow(TruncselError):
    """All class likelihoods for a row underflow to zero."""


class EmptyClass(TruncselError):
    """A latent class has (numerically) no members."""


class SeparationDetected(TruncselError):
    """Quasi-complete separation in the class-prior logit fit."""


class NoConvergence(TruncselError):
    """Iteration limit reached before the convergence criterion."""


# --- opinion space ------------------------------------------------------------

class EmptyCell(TruncselError):
    """A (class, opinion) partition cell is empty."""


class DegenerateDimension(TruncselError):
    """Bandwidth undefined: fewer than two points."""


class SingularBandwidth(TruncselError):
    pass


# --- estimation ---------------------------------------------------------------

class DimensionMismatch(TruncselError):
    pass


class RankDeficient(TruncselError):
    pass


# --- penalized selection --------------------------------------------------------

class NegativeInput(TruncselError):
    pass


class NonPositiveMse(TruncselError):
    pass


class SingularSystem(TruncselError):
    """The sign-search linear system is not invertible at this tuning value."""


# --- data generation ------------------------------------------------------------

class QuadratureNotConverged(TruncselError):
    pass


class InfeasibleTarget(TruncselError):
    """The density dictionary cannot realize the requested participation share."""


class EmptySelection(TruncselError):
    """Truncation removed every observation."""


# --- study driver ----------------------------------------------------------------

class AllReplicationsFailed(TruncselError):
    pass


class StudyAborted(TruncselError):
    """More than the tolerated share of replications failed."""
