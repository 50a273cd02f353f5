"""Exception hierarchy. Each family maps to a CLI exit code."""


class LabError(Exception):
    exit_code = 1


class ConfigError(LabError):
    exit_code = 2


class DataError(LabError):
    exit_code = 3


class SplitViolation(DataError):
    """An image was consumed by a stage its split does not permit."""


class NumericalError(LabError):
    exit_code = 4


class ShapeError(LabError, ValueError):
    pass


class FrozenParameterError(LabError):
    pass


class DegenerateInput(LabError):
    """Paired comparison where every difference is zero."""

    exit_code = 5
