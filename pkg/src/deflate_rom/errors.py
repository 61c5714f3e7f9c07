"""Exception hierarchy shared by all modules."""


class DeflateRomError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DeflateRomError, ValueError):
    """Operands have incompatible shapes."""


class NotPositiveDefiniteError(DeflateRomError, ArithmeticError):
    """A form expected to be symmetric positive definite failed to factorize."""


class CoercivityError(DeflateRomError, ArithmeticError):
    """The measured coercivity constant is below the certified one."""


class NodeSolveError(DeflateRomError, ArithmeticError):
    """A per-node solve failed; ``node`` carries the offending grid index."""

    def __init__(self, node, message):
        super().__init__(f"node {node}: {message}")
        self.node = node


class SingularSystemError(NodeSolveError):
    """A reduced system is singular, which signals a dependent basis."""


class ZeroDataError(DeflateRomError, ValueError):
    """The right-hand side vanishes at every node, so every direction is optimal."""


class ConvergenceError(DeflateRomError, RuntimeError):
    """An iterative method exhausted its budget.

    ``best`` holds the best iterate found so far so callers can inspect or
    accept it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class ConfigError(DeflateRomError, ValueError):
    """Invalid user configuration (CLI exit code 1)."""


class InvariantError(DeflateRomError, AssertionError):
    """A runtime identity check failed beyond tolerance (CLI exit code 2)."""

    def __init__(self, identity, message):
        super().__init__(f"{identity}: {message}")
        self.identity = identity
