"""Exception hierarchy shared by the solvers and the command layer."""


class Error(Exception):
    """Base class for every failure raised by stochcov."""

    exit_code = 1


class ProblemError(Error):
    """A problem definition violates its contract (dimensions, Jacobian, name)."""

    pass


class IntegrationError(Error):
    """A trajectory left the finite range of doubles."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConvergenceError(Error):
    """Newton iteration, series or fixed-point iteration failed to converge."""

    pass


class SingularSystemError(Error):
    """A linear system that should be regular turned out singular."""

    pass


class VerificationError(Error):
    """A computed object failed one of its defining identities."""

    pass


class ConfigError(Error):
    """Invalid run configuration or missing input files."""

    exit_code = 2
