"""Exception types raised across the toolkit."""


class AberraError(Exception):
    """Base class for every error raised by this package."""


class DomainError(AberraError, ValueError):
    """Sag evaluated outside a surface's geometric extent."""


class ParseError(AberraError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ValidationError(AberraError, ValueError):
    """A prescription, spec or config violates one of its invariants."""


class RangeError(AberraError, ValueError):
    """Wavelength outside the supported 380-780 nm band."""


# ray tracing
class MissSurface(AberraError):
    pass


class NoConvergence(AberraError):
    pass


class TotalInternalReflection(AberraError):
    pass


class AllRaysVignetted(AberraError):
    pass


class AfocalSystem(AberraError):
    pass


# psf / degradation
class KernelOverflow(AberraError):
    def __init__(self, fraction, kernel_px):
        self.fraction = fraction
        self.kernel_px = kernel_px
        super().__init__(
            f"{fraction:.2%} of rays fall outside the {kernel_px}x{kernel_px} kernel window"
        )


class GridMismatch(AberraError, ValueError):
    pass


class PatchError(AberraError):
    """A single patch of a PSF grid failed; carries the patch index."""

    def __init__(self, index, cause):
        self.index = index
        self.cause = cause
        super().__init__(f"patch {index}: {cause}")


# metrics
class ShapeMismatch(AberraError, ValueError):
    pass


class ImageTooSmall(AberraError, ValueError):
    pass


class NoEdgeFound(AberraError):
    pass


class EdgeTooSteep(AberraError):
    """Edge angle outside the range usable by the slanted-edge method."""


class AllRoisFailed(AberraError):
    pass


class ZeroMean(AberraError, ZeroDivisionError):
    pass


# benchmark
class TooFewLenses(AberraError, ValueError):
    pass


class DatasetError(AberraError):
    def __init__(self, gt, lens_id, cause):
        self.gt = gt
        self.lens_id = lens_id
        self.cause = cause
        super().__init__(f"gt={gt} lens={lens_id}: {cause}")
