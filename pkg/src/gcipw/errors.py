"""Exception hierarchy and CLI exit codes."""


class GcipwError(Exception):
    """Base class for all package errors."""

    exit_code = 5


class ConfigError(GcipwError):
    exit_code = 2


class DataError(GcipwError):
    exit_code = 3


class NumericalError(GcipwError):
    exit_code = 4


# --- configuration / input validation ---

class ConfigInvalid(ConfigError):
    pass


class DimensionMismatch(DataError):
    pass


class AlignmentMismatch(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, path=None, line=None, column=None):
        super().__init__(message)
        self.path = path
        self.line = line
        self.column = column


class ShapeMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class SeriesTooShort(DataError):
    pass


# --- numerical failures ---

class RankDeficient(NumericalError):
    pass


class InsufficientSamples(NumericalError):
    pass


class NonStationaryProcess(NumericalError):
    pass


class DegenerateResidual(NumericalError):
    pass


class Separation(NumericalError):
    pass


class RankDeficientDesign(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class SingularInformation(NumericalError):
    pass


class EmptyActiveSet(NumericalError):
    pass
