"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` so the CLI can map
failures onto its exit-code table without string matching.
"""


class DynlinError(Exception):
    """Base class for all package errors."""

    code = "error"


class ShapeError(DynlinError):
    """An array has the wrong rank or an incompatible shape."""

    code = "shape"


class ParameterError(DynlinError):
    """A parameter value is out of its documented range."""

    code = "parameter"


class CapabilityError(DynlinError):
    """The model contains a construct this toolkit cannot freeze."""

    code = "capability"


class IntegrityError(DynlinError):
    """A numerical guarantee (completeness or oracle agreement) was breached."""

    code = "integrity"


class ResourceError(DynlinError):
    """A dense construction would exceed the configured size cap."""

    code = "resource"


class FormatError(DynlinError):
    """A model bundle or input file could not be read."""

    code = "format"


class VersionError(FormatError):
    code = "format/version"


class UnknownKindError(FormatError):
    code = "format/unknown-kind"


class MissingBlobError(FormatError):
    code = "format/missing-blob"


class ShapeChainError(FormatError):
    """Consecutive layers disagree about the shape flowing between them."""

    code = "format/shape-chain"


class ChecksumError(FormatError):
    code = "format/checksum"


class UndefinedCorrelationError(DynlinError):
    """Pearson correlation is undefined because one series has zero variance."""

    code = "undefined-correlation"
