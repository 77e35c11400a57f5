"""Exception hierarchy shared across the package."""


class CNSNetError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CNSNetError, ValueError):
    pass


class InvalidConfigError(CNSNetError, ValueError):
    pass


class ContractViolation(CNSNetError, RuntimeError):
    """An internal precondition between components was broken."""


class UndefinedMetricError(CNSNetError, ValueError):
    pass


class FormatError(CNSNetError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ParseError(FormatError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SplitError(CNSNetError, ValueError):
    pass
