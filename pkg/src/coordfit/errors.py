"""Exception hierarchy shared by all coordfit modules."""


class CoordfitError(Exception):
    """Base class for every error raised by coordfit."""


class FitError(CoordfitError):
    """A model could not be fitted to the supplied correspondences."""


class DegenerateGeometry(FitError):
    pass


class EmptyMask(FitError, ValueError):
    pass


class SingularSystem(FitError):
    pass


class NoConsensus(FitError):
    pass


class NoValidSupervoxels(FitError):
    pass


class LogUndefined(FitError, ValueError):
    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class OutOfSupport(CoordfitError, ValueError):
    pass


class GridMismatch(CoordfitError, ValueError):
    pass


class SpecInvalid(CoordfitError, ValueError):
    pass


class NiftiError(CoordfitError, ValueError):
    """Malformed or unsupported NIfTI-1 input."""


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedFile(NiftiError):
    pass


class DimensionMismatch(NiftiError):
    pass
