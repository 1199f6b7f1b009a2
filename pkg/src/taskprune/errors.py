"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violates an operation's precondition."""


class ShapeError(ValidationError):
    """A tensor dimension mismatch; the message names the offending layer."""
