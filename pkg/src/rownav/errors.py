"""Exception types shared across the package."""


class RownavError(Exception):
    pass


class NotVisible(RownavError):
    """Point is behind the camera plane or outside the image."""


class DegenerateView(RownavError):
    pass


class EmptyPath(RownavError):
    pass


class NoVisiblePath(RownavError):
    pass


class ClockSkew(RownavError):
    def __init__(self, message, frame_id=None):
        super().__init__(message)
        self.frame_id = frame_id


class NoPath(RownavError):
    pass


class DetectionInvalid(RownavError):
    def __init__(self, message, heading_error_deg=None):
        super().__init__(message)
        self.heading_error_deg = heading_error_deg


class InsufficientDepth(RownavError):
    pass


class DegenerateFit(RownavError):
    pass


class StaleGps(RownavError):
    pass


class StationarySegment(RownavError):
    pass


class SchemaError(RownavError):
    """A log or config file does not match the expected layout."""
