"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (bad sizes, unknown experiment kinds, ...)."""


class DomainError(ValueError):
    """Argument outside an operation's domain (negative threshold, shape mismatch)."""


class ParseError(ValueError):
    """Malformed binary or text payload."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """Non-convergence or non-finite values in a numeric routine."""

    def __init__(self, message, residual=None, layer=None):
        super().__init__(message)
        self.residual = residual
        self.layer = layer


class TrainingError(RuntimeError):
    """Meta-training diverged."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
