"""Exception types shared across the package."""


class PixelboxError(ValueError):
    """Base class for all library-specific errors."""


class NonPositiveDepth(PixelboxError):
    """A 3D point lies at or behind the camera plane (z <= 0)."""


class VirtualDepthNotConverted(PixelboxError):
    """Metric depths were required but the corner set is in virtual space."""


class NonPositiveInput(PixelboxError):
    """A quantity that must be strictly positive was not."""


class DegenerateBox(PixelboxError):
    """A 2D box has non-positive width or height."""


class DegenerateCorners(PixelboxError):
    """A 3D corner set has rank < 2; no stable rotation can be fit."""


class ShapeMismatch(PixelboxError):
    """Array arguments do not share the required shape."""


class NonFiniteCost(PixelboxError):
    """An assignment cost matrix contains NaN or infinite entries."""


class NonPositiveDiagonal(PixelboxError):
    """The ground-truth box diagonal used for normalization is not positive."""


class NonPositiveGtDepth(PixelboxError):
    """A ground-truth depth used as a relative-error denominator is not positive."""


class DepthSpaceMismatch(PixelboxError):
    """Two corner sets are tagged with different depth spaces."""


class MissingIntrinsics(PixelboxError):
    """An operation requiring camera intrinsics was run on a scene without them."""


class UnmatchedInstance(PixelboxError):
    """Prediction and ground-truth instance ids do not pair up one-to-one."""


class SchemaError(PixelboxError):
    """A record in an input file violates the documented schema.

    Carries the 1-based line number of the offending record when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GenerationExhausted(RuntimeError):
    """The synthetic generator ran out of retries for an infeasible config."""


class Diverged(RuntimeError):
    """The heatmap fit produced a non-finite loss."""
