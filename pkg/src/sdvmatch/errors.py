"""Exception types raised across the package.

Every anticipated failure maps to one of these classes so callers (and the
CLI) can distinguish data problems from bugs. All of them derive from
:class:`SdvMatchError`.
"""


class SdvMatchError(Exception):
    """Base class for all errors raised by this package."""


# --- file formats -----------------------------------------------------------

class MalformedHeader(SdvMatchError):
    pass


class UnsupportedEncoding(SdvMatchError):
    pass


class MissingCoordinateProperty(SdvMatchError):
    pass


class TruncatedPayload(SdvMatchError):
    pass


class BadMagic(SdvMatchError):
    pass


class DimMismatch(SdvMatchError):
    pass


class VersionMismatch(SdvMatchError):
    pass


class UnknownKey(SdvMatchError):
    pass


class InvariantViolation(SdvMatchError):
    pass


# --- geometry / pipeline ----------------------------------------------------

class DegenerateSupport(SdvMatchError):
    """Keypoint neighborhood too poor to define a reference frame."""


class DegenerateConfiguration(SdvMatchError):
    """Point sample is collinear/coincident; rigid fit is ill-posed."""


class EmptyCloud(SdvMatchError):
    pass


# --- network ----------------------------------------------------------------

class BadArchitecture(SdvMatchError):
    pass


class ShapeMismatch(SdvMatchError):
    pass


class StaleCache(SdvMatchError):
    """Backward pass received a cache that does not match the parameters."""


# --- training / matching / evaluation ---------------------------------------

class InsufficientOverlap(SdvMatchError):
    pass


class BatchTooSmall(SdvMatchError):
    pass


class TooFewCorrespondences(SdvMatchError):
    pass


class NoModelFound(SdvMatchError):
    pass


class EmptyCorrespondences(SdvMatchError):
    pass


class NoPairs(SdvMatchError):
    pass
