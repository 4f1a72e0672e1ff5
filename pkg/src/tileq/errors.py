"""Exception hierarchy shared by every module."""


class TileQError(Exception):
    """Base class for all library errors."""


class ShapeError(TileQError, ValueError):
    pass


class ParameterError(TileQError, ValueError):
    pass


class DataError(TileQError, ValueError):
    pass


class SizeError(TileQError, ValueError):
    pass


class NumericError(TileQError, ArithmeticError):
    pass


class ExpertIndexError(TileQError, IndexError):
    pass


class FormatError(TileQError, ValueError):
    pass


class CorruptArtifactError(FormatError):
    pass
