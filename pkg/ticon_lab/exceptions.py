"""Typed errors shared by every app.

Each error carries the process exit code the pipeline commands report for it:
2 for configuration and registry problems, 3 for data or format problems and
4 for numerical failures.
"""


class TiconError(Exception):
    exit_code = 1


class ConfigError(TiconError):
    exit_code = 2


class RegistryError(TiconError):
    exit_code = 2


class DataError(TiconError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f'{message} (at byte offset {offset})'
        super().__init__(message)


class ShapeError(DataError):
    pass


class RangeError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class DegenerateGridError(DataError):
    pass


class AlignmentError(DataError):
    pass


class DatasetError(DataError):
    pass


class MetricError(DataError):
    pass


class BatchError(DataError):
    pass


class NumericalError(TiconError):
    exit_code = 4
