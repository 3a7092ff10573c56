"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`LatentMapError`, so the CLI
can translate any expected failure into a clean nonzero exit.
"""


class LatentMapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LatentMapError):
    """Invalid argument, shape mismatch, or broken invariant on input data."""


class OutOfBoundsError(LatentMapError):
    """Query point lies outside the configured scene bounds."""


class BehindCameraError(LatentMapError):
    """World point has non-positive depth in the camera frame."""


class EmptyMapError(LatentMapError):
    """Operation requires occupied vertices but the occupancy set is empty."""


class FormatError(LatentMapError):
    """Malformed or corrupted file. Message carries a byte offset when known."""
