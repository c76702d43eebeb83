"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data and
file-format problems exit 3, numeric failures exit 4.
"""


class ReIDError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(ReIDError, ValueError):
    pass


class ParameterError(ReIDError, ValueError):
    pass


class ContractError(ReIDError, ValueError):
    pass


class LabelError(ReIDError, ValueError):
    pass


class ConfigError(ReIDError, ValueError):
    exit_code = 2


class DatasetError(ReIDError):
    exit_code = 3


class FormatError(DatasetError):
    """A binary file (image or checkpoint) could not be decoded."""

    def __init__(self, message, offset=None, path=None):
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))
        self.offset = offset
        self.path = path


class NumericError(ReIDError, ArithmeticError):
    exit_code = 4
