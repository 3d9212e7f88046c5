"""Exception hierarchy shared by all modules."""


class ContourPoseError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(ContourPoseError, ValueError):
    pass


class BehindCameraError(ContourPoseError):
    """A point that must be projected lies at z <= 0.

    ``index`` identifies the offending point when the failure came from a
    batch (e.g. a contour point set inside a loss evaluation).
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DegenerateGeometryError(ContourPoseError):
    """Rendering preconditions violated (vertex behind the near plane, empty view)."""


class EmptyContourError(ContourPoseError):
    pass


class DegenerateHypothesisError(ContourPoseError):
    pass


class DegenerateSceneError(ContourPoseError):
    pass


class ObjParseError(ContourPoseError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
