"""Exception hierarchy shared by all voxelcap modules."""


class VoxelcapError(Exception):
    """Base class for every error raised by this package."""


class PointAtInfinity(VoxelcapError):
    pass


class ParseError(VoxelcapError):
    """Malformed text input. ``line`` is 1-based, or None when not applicable."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateCamera(VoxelcapError):
    pass


class EmptyInput(VoxelcapError):
    pass


class DimensionMismatch(VoxelcapError):
    pass


class CountMismatch(VoxelcapError):
    pass


class MalformedTree(VoxelcapError):
    pass


class ZeroTotalWeight(VoxelcapError):
    pass


class TrackingLost(VoxelcapError):
    """Raised by the annealed filter when every particle weight vanished."""

    def __init__(self, message, frame=None):
        self.frame = frame
        super().__init__(message)


class ConfigError(VoxelcapError):
    pass


class FrameError(VoxelcapError):
    """A module error raised while processing one frame of a sequence."""

    def __init__(self, frame, cause):
        self.frame = frame
        self.cause = cause
        super().__init__(f"frame {frame}: {type(cause).__name__}: {cause}")
