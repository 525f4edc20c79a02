"""Exception hierarchy shared across the package."""


class GlassvolError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(GlassvolError):
    """Mismatched counts, shapes, or resolutions between paired inputs."""


class RenderError(GlassvolError):
    """Renderer rejected its inputs (e.g. non-finite payloads)."""


class SingularLensError(GlassvolError):
    """Lens configuration is degenerate (camera on the front focal plane,
    zero-radius reflection sphere, hit at the sphere center)."""


class NumericError(GlassvolError):
    """Non-finite value encountered during optimization; message names the
    offending parameter block or stage."""


class DataError(GlassvolError):
    """Dataset or input file is missing required assets or malformed."""


class FileFormatError(DataError):
    """Base for persisted-file errors."""


class VersionError(FileFormatError):
    """File declares a format version this build cannot read."""


class ChecksumError(FileFormatError):
    """Stored checksum does not match the payload."""


class TruncationError(FileFormatError):
    """File ended before the declared payload was read."""


class TriangulationError(GlassvolError):
    """Keypoint triangulation is ill-conditioned (degenerate baseline)."""
