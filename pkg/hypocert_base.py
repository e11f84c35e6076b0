"""
Common Hypocert Interfaces and Types
Defines the constant groups and the exception hierarchy shared by every
verification module so the harness can treat all stages in a uniform way.
"""

from typing import Optional


FORMAT_VERSION = "1"
TOOL_VERSION = "1.0.0"


class Scheme:
    """Constants for the time integrators."""
    EULER_MARUYAMA = "euler_maruyama"
    EXACT_OU = "exact_ou"

    ALL = (EULER_MARUYAMA, EXACT_OU)


class PotentialKind:
    """Constants for the shipped confining potentials."""
    QUADRATIC = "quadratic"
    BUMP_DOUBLE_WELL = "bump_double_well"


class GroundMetric:
    """Names of the ground metrics accepted by the Wasserstein routines."""
    EUCLIDEAN = "euclidean"
    RHO = "rho"
    RHO_R = "rho_r"
    D = "d"

    ALL = (EUCLIDEAN, RHO, RHO_R, D)


class Provenance:
    """Where a certificate constant came from."""
    DERIVED = "derived"
    MEASURED = "measured"
    CONFIGURED = "configured"


class ExitCode:
    """Process exit codes of the CLI."""
    OK = 0
    USAGE = 1
    FAILED = 2
    INCONCLUSIVE = 3


class HypocertError(Exception):
    """Base class of every error raised by the library."""


class InvalidArgumentError(HypocertError, ValueError):
    """An argument violates the operation's precondition."""


class NumericalBlowupError(HypocertError, FloatingPointError):
    """A simulated path produced a non-finite state."""

    def __init__(self, message: str, path_index: Optional[int] = None,
                 time: Optional[float] = None):
        super().__init__(message)
        self.path_index = path_index
        self.time = time


class UnsupportedSchemeError(HypocertError, ValueError):
    """The requested integrator cannot be used with this potential."""


class ConstructionError(HypocertError):
    """A potential could not be built; `point` is the violating position."""

    def __init__(self, message: str, point: Optional[float] = None):
        super().__init__(message)
        self.point = point


class DerivationError(HypocertError):
    """Lyapunov constants could not be derived."""


class PreconditionError(InvalidArgumentError):
    """A time threshold is not met; `minimal_t` is the smallest valid time."""

    def __init__(self, message: str, minimal_t: Optional[float] = None):
        super().__init__(message)
        self.minimal_t = minimal_t


class CertificateError(HypocertError):
    """A stage of the certificate pipeline failed."""

    def __init__(self, message: str, stage: str = "", constant: Optional[str] = None):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage
        self.constant = constant


class InconclusiveError(CertificateError):
    """A stage could not decide: zero successes or saturated weights."""


class ConfigError(HypocertError):
    """The experiment configuration is unreadable or invalid."""

    def __init__(self, message: str, field: Optional[str] = None,
                 line: Optional[int] = None):
        where = ""
        if field:
            where += f" (field '{field}'"
            where += f", line {line})" if line else ")"
        super().__init__(message + where)
        self.field = field
        self.line = line


class SchemaError(HypocertError):
    """A CSV header does not match its registered schema."""
