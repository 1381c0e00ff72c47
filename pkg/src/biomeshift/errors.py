"""Exception hierarchy shared by every subsystem."""


class BiomeShiftError(Exception):
    pass


class ShapeError(BiomeShiftError, ValueError):
    """Operand extents are inconsistent with an operation's contract."""


class ParameterError(BiomeShiftError, ValueError):
    """A scalar or configuration argument lies outside its valid range."""


class ConfigError(ParameterError):
    pass


class DataError(BiomeShiftError, ValueError):
    """Input data violates a content constraint (label range, empty set...)."""


class NoLabeledPixelsError(DataError):
    def __init__(self, msg="no labeled pixels: every entry carries the unlabeled sentinel"):
        super().__init__(msg)


class UndefinedCorrelationError(DataError):
    pass


class FormatError(BiomeShiftError):
    """A binary container could not be decoded."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class IntegrityError(FormatError):
    pass
