class QHydroError(Exception):
    """Base class for engine errors."""


class ConfigError(QHydroError, ValueError):
    pass


class DegenerateGeometryError(QHydroError):
    """Neighbor stencil cannot support the cubic fit."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SizingError(QHydroError, ValueError):
    pass


class NumericalFailure(QHydroError):
    pass


class DomainExit(NumericalFailure):
    def __init__(self, message, element_id=None, time=None):
        super().__init__(message)
        self.element_id = element_id
        self.time = time


class ResolutionError(QHydroError):
    pass


class AlignmentError(QHydroError):
    pass


class LineageError(QHydroError):
    pass


class SnapshotFormatError(QHydroError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
