"""Exception hierarchy shared by every toolkit stage.

Each error carries the process exit code the CLI reports for it: 2 for bad
input or usage, 3 for numerical failures and infeasible requests.
"""

from typing import Optional

EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class ToolkitError(Exception):
    """Base class for all toolkit errors"""

    exit_code: int = EXIT_INPUT


# Input / usage family

class DimensionError(ToolkitError, ValueError):
    """Shapes of two inputs do not agree"""


class UsageError(ToolkitError):
    """An operation was called outside its preconditions"""


class DomainError(ToolkitError, ValueError):
    """A scalar argument lies outside its mathematical domain"""


class ResourceError(ToolkitError):
    """The requested computation would not fit in memory"""


class TableFormatError(ToolkitError):
    """A labels / outputs / curve text table is malformed"""


class GradientFileError(ToolkitError):
    """A binary gradient or kernel file cannot be parsed"""


class BadMagicError(GradientFileError):
    def __init__(self, expected: bytes, found: bytes):
        super().__init__(f"Bad magic: expected {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


class UnsupportedVersionError(GradientFileError):
    pass


class TruncatedPayloadError(GradientFileError):
    def __init__(self, required: int, available: int):
        super().__init__(
            f"Truncated payload: {required} values required, {available} available"
        )
        self.required = required
        self.available = available


class DimensionOverflowError(GradientFileError):
    pass


# Numerical family

class NumericalError(ToolkitError):
    exit_code = EXIT_NUMERICAL


class InstabilityError(NumericalError):
    """Loss blew past the divergence threshold"""

    def __init__(self, step: int, loss: float, threshold: float):
        super().__init__(
            f"Diverged at step {step}: loss {loss:.3e} exceeds {threshold:.1e}"
        )
        self.step = step
        self.loss = loss


class EigenConvergenceError(NumericalError):
    def __init__(self, iterations: int, detail: Optional[str] = None):
        message = f"Eigendecomposition did not converge after {iterations} iterations"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.iterations = iterations


class FitError(NumericalError):
    pass


class ExtrapolationError(NumericalError):
    pass
