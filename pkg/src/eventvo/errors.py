"""Exception types shared across the odometry engine."""


class EventVOError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(EventVOError):
    """A text input could not be parsed; carries the file path and line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ValidationError(EventVOError):
    """Parsed data violates a documented invariant (bounds, uniqueness, ...)."""


class ConfigError(EventVOError):
    """Missing, unknown, or invalid configuration key."""


class GeometryError(EventVOError):
    """Base class for geometric failures."""


class BehindCameraError(GeometryError):
    """Point has non-positive depth in the camera frame."""


class DegenerateGeometryError(GeometryError):
    """Configuration too ill-conditioned to solve (zero baseline, rank loss, ...)."""


class CheiralityError(GeometryError):
    """Triangulated point lies behind one of the cameras."""


class UnderdeterminedError(GeometryError):
    """Too few observations for the number of degrees of freedom."""


class DecompositionError(GeometryError):
    """No essential-matrix candidate passed the cheirality test."""


class BootstrapDeferred(EventVOError):
    """Two-view initialization cannot run yet; wait for more data."""


class GenerationError(EventVOError):
    """Synthetic scene specification is unusable."""
