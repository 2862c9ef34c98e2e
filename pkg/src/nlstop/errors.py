"""Exception hierarchy. Each error carries a stable machine-readable code."""


class NlstopError(Exception):
    code = "NUMERICAL_FAILURE"


class InvalidInput(NlstopError):
    """Raised for malformed user input (exit code 2 at the CLI)."""

    code = "CONFIG_INVALID"


class InvalidGrid(InvalidInput):
    code = "GRID_INVALID"


class NoContraction(InvalidInput):
    code = "NO_CONTRACTION"


class OracleTooLarge(InvalidInput):
    code = "ORACLE_TOO_LARGE"


class BadOrdering(InvalidInput):
    code = "BAD_ORDERING"


class BadConstants(InvalidInput):
    code = "BAD_CONSTANTS"


class PreconditionFailed(InvalidInput):
    code = "PRECONDITION_FAILED"


class PositivityViolated(InvalidInput):
    code = "POSITIVITY_VIOLATED"


class MonotonicityFailed(InvalidInput):
    code = "MONOTONICITY_FAILED"


class ExpressionError(InvalidInput):
    code = "EXPRESSION_INVALID"


class UnknownCheck(InvalidInput):
    code = "UNKNOWN_CHECK"


class NonConvergence(NlstopError):
    code = "NON_CONVERGENCE"


class NotSupermartingale(NlstopError):
    code = "NOT_SUPERMARTINGALE"


class NotOptimal(NlstopError):
    code = "NOT_OPTIMAL"
