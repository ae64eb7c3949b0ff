"""Exception types shared across the package.

Every error raised on a documented contract boundary has its own class so
callers (and tests) can catch precisely. ``VolplaceError`` is the common
base; validation-style errors also inherit ``ValueError`` so generic
callers behave sensibly.
"""


class VolplaceError(Exception):
    """Base class for all package-specific errors."""


# --- graph construction / io ---------------------------------------------

class InvalidGraph(VolplaceError, ValueError):
    """A graph violates a structural invariant."""


class MissingFile(VolplaceError, FileNotFoundError):
    pass


class ParseError(VolplaceError, ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateNodeId(InvalidGraph):
    pass


class DanglingEdgeEndpoint(InvalidGraph):
    pass


class DuplicateEdge(InvalidGraph):
    pass


class EmptyGraph(InvalidGraph):
    pass


class IoError(VolplaceError, OSError):
    pass


class InvalidConfig(VolplaceError, ValueError):
    pass


class InvalidFraction(VolplaceError, ValueError):
    pass


class TooFewUnlabeled(VolplaceError, ValueError):
    pass


# --- tensor engine ---------------------------------------------------------

class ShapeMismatch(VolplaceError, ValueError):
    pass


class NonFiniteValue(VolplaceError, ArithmeticError):
    pass


class NotScalarLoss(VolplaceError, ValueError):
    pass


class DetachedTensor(VolplaceError, ValueError):
    """backward() called on a tensor with no recorded computation."""


# --- model training --------------------------------------------------------

class EmptyTrainSet(VolplaceError, ValueError):
    pass


class NonFiniteLoss(VolplaceError, ArithmeticError):
    pass


class EmptyPooledGraph(VolplaceError, ValueError):
    pass


class NotFitted(VolplaceError, RuntimeError):
    """Estimator used before fit()."""


# --- placement agent -------------------------------------------------------

class EmptyCandidateSet(VolplaceError, ValueError):
    pass


class WrongPolicyKind(VolplaceError, ValueError):
    pass


class InvalidAction(VolplaceError, ValueError):
    pass


class BudgetExhausted(VolplaceError, RuntimeError):
    pass


class EmptyBuffer(VolplaceError, ValueError):
    pass


class BudgetTooLarge(VolplaceError, ValueError):
    pass


# --- baselines -------------------------------------------------------------

class MissingActivityVector(VolplaceError, ValueError):
    pass


class DegenerateDesignMatrix(VolplaceError, ValueError):
    pass


# --- metrics / harness -----------------------------------------------------

class LengthMismatch(VolplaceError, ValueError):
    pass


class AllExcludedFromMAPE(VolplaceError, ValueError):
    pass


class GraphMismatch(VolplaceError, ValueError):
    pass


class UnknownSubcommand(VolplaceError, ValueError):
    pass
