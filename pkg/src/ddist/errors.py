"""Exception types shared across the package.

Every error raised on a user-facing path derives from DdistError so the CLI
can map failures to exit codes without pattern-matching on messages.
"""


class DdistError(Exception):
    """Base class for all package errors."""


class ShapeError(DdistError):
    """Operand shapes incompatible with an operation."""


class DomainError(DdistError):
    """Value outside an operation's mathematical domain (log of <= 0, ...)."""


class ContractError(DdistError):
    """API misuse: non-scalar backward target, reused freed graph, bad window."""


class DivergenceError(DdistError):
    """Parameters blew up or went non-finite during an inner training run."""

    def __init__(self, step, detail=""):
        self.step = step
        msg = f"divergence at inner step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class FormatError(DdistError):
    """Malformed file: checkpoint, IDX, or CSV parse failure."""


class ConfigError(DdistError):
    """Invalid run configuration (unknown key, constraint violation)."""


class DataError(DdistError):
    """Dataset content unusable (non-finite values, degenerate covariance)."""
