"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class InvalidInputError(ValueError):
    """Data does not satisfy an operation's preconditions."""


class InvalidBatchError(InvalidInputError):
    """Pair batch lacks the same/different pairs an operation needs."""


class InvalidReferenceError(InvalidInputError):
    """Reference set is missing at least one class."""


class ParseError(ValueError):
    """Malformed feature CSV."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.row = row
        self.column = column


class NumericInstabilityError(ArithmeticError):
    """A loss or parameter became non-finite."""


class DegenerateDenominator(ArithmeticError):
    """Mean different-class distance does not exceed mean same-class distance."""

    def __init__(self, same_mean, diff_mean):
        super().__init__(
            f"distance ratio undefined: D - S = {diff_mean - same_mean:.3g}"
        )
        self.same_mean = same_mean
        self.diff_mean = diff_mean
