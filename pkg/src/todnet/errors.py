"""Exception hierarchy shared by the library and the CLI."""


class TodNetError(Exception):
    """Base class for every error raised by todnet."""


class UsageError(TodNetError, ValueError):
    """Caller passed arguments that violate an operation's preconditions."""


class DegenerateInputError(TodNetError, ValueError):
    """A vector with zero norm reached an operation that divides by the norm."""


class NumericOverflowError(TodNetError, ArithmeticError):
    """A conditioner produced a non-finite scale or shift."""


class ParseError(TodNetError):
    """Base class for malformed embedding files and checkpoints."""


class BadMagicError(ParseError):
    pass


class UnsupportedVersionError(ParseError):
    pass


class TruncatedFileError(ParseError):
    pass


class TrailingDataError(ParseError):
    pass


class OddDimensionError(ParseError):
    pass


class GroupIntegrityError(ParseError):
    pass


class LayerShapeError(ParseError):
    """Checkpoint layer shapes do not chain or do not match the dimension."""


class VerificationError(TodNetError):
    """A numerical self-check exceeded its tolerance."""


class InvalidRecordError(ParseError):
    """A record carries an unknown modality byte or a non-finite value."""
