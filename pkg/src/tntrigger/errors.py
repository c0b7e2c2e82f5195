"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: :class:`DataError` subclasses give 2,
:class:`NumericError` subclasses give 3, :class:`ConfigError` gives 1.
"""


class TnError(Exception):
    pass


class ConfigError(TnError, ValueError):
    """Invalid architecture, option or argument combination."""


class DimensionError(TnError, ValueError):
    pass


class DataError(TnError):
    """Input files or records that cannot be accepted."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DataError):
    pass


class NumericError(TnError, ArithmeticError):
    pass


class DegenerateInputError(NumericError):
    pass


class PlanIntegrityError(TnError):
    """A plan step received operands whose shapes do not fit together."""

    def __init__(self, message: str, step_index: int | None = None):
        self.step_index = step_index
        if step_index is not None:
            message = f"step {step_index}: {message}"
        super().__init__(message)
