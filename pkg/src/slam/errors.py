"""Exception hierarchy shared by every stage of the engine."""


class SlamError(Exception):
    """Base class for all engine errors."""


class IoError(SlamError, OSError):
    """A dataset or output file could not be read or written."""


class FormatError(SlamError, ValueError):
    """A file was readable but its contents do not follow the expected layout."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(SlamError, ValueError):
    """Invalid or unknown configuration value."""


class InsufficientOverlap(SlamError):
    """Fewer than three frames are shared between two trajectories."""


class DegenerateCloud(SlamError):
    """Too few or collinear points to fit a plane."""


class NoGround(SlamError):
    """No plane reached the minimum inlier fraction."""


class BehindCamera(SlamError):
    """A point has non-positive depth in the virtual camera."""


class EmptyPixel(SlamError):
    """Back-projection requested for a pixel no point landed on."""


class PatchOutOfBounds(SlamError):
    """A descriptor or orientation patch does not fit inside the image."""


class TooFewMatches(SlamError):
    """Fewer correspondences than a minimal sample needs."""


class DegenerateGeometry(SlamError):
    """Correspondences are coincident or collinear, so no unique rigid motion exists."""


class NoHistory(SlamError):
    """No previous motion is available for the constant-velocity fallback."""


class DuplicateKeyFrame(SlamError):
    """A keyframe id was registered twice."""


class SingularNormalEquations(SlamError):
    """The damped normal equations could not be solved."""


class DisconnectedGraph(SlamError):
    """The pose graph has nodes unreachable from the anchor node."""
