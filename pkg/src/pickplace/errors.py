"""Exception types shared across the package."""


class PickPlaceError(Exception):
    """Base class for all package errors."""


class EmptyInputError(PickPlaceError, ValueError):
    """An operation received an empty point set where points are required."""


class ParameterError(PickPlaceError, ValueError):
    """A numeric parameter is out of its allowed range or shapes mismatch."""


class DegenerateGeometryError(PickPlaceError, ValueError):
    """Geometry is too degenerate for the requested computation."""


class EmptySceneError(PickPlaceError, ValueError):
    """An occupancy grid has nothing occupied (or nothing free)."""


class FormatError(PickPlaceError, ValueError):
    """A file does not match its declared binary or text format."""


class InfeasibleInitError(PickPlaceError):
    """No collision-free placement candidate could be produced."""
