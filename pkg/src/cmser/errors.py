"""Exception hierarchy shared across the package."""


class CmserError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CmserError, ValueError):
    pass


class MaskError(CmserError, ValueError):
    """A sequence or key set has no valid (unmasked) positions."""


class GradCheckError(CmserError, ArithmeticError):
    pass


class FormatError(CmserError):
    """A binary or text file does not follow its declared layout."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFiniteError(CmserError, ValueError):
    pass


class ManifestError(CmserError, ValueError):
    pass


class ConfigError(CmserError, ValueError):
    pass


class TrainingDivergedError(CmserError, ArithmeticError):
    pass
