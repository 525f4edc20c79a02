"""Compositional volumetric-primitive rendering and inverse rendering of
faces with eyeglasses."""

from .errors import (
    ChecksumError,
    DataError,
    DimensionError,
    FileFormatError,
    GlassvolError,
    NumericError,
    RenderError,
    SingularLensError,
    TriangulationError,
    TruncationError,
    VersionError,
)
from .raymarch import (
    AccelStructure,
    Camera,
    Image,
    PrimitiveSetGradients,
    RenderConfig,
    SceneGradients,
    build_accel,
    psnr,
    render,
    render_alpha,
    render_backward,
    render_mask,
    ssim,
)
from .volprim import (
    PrimitiveSet,
    ResidualDeformation,
    Scene,
    apply_residuals,
    compose,
    interpolate_sets,
    sample_payload,
)

__all__ = [name for name in dir() if not name.startswith("_")]
