"""Exception hierarchy shared by every module.

Each class carries a ``kind`` tag used by the command line to print
``error: <kind>: <message>`` lines.
"""


class SegminiError(Exception):
    kind = "error"


class ShapeError(SegminiError, ValueError):
    kind = "shape"


class SizeError(ShapeError):
    kind = "size"


class FormatError(SegminiError, ValueError):
    kind = "format"


class DataError(SegminiError, ValueError):
    kind = "data"


class ConfigError(SegminiError, ValueError):
    kind = "config"


class StateError(SegminiError, RuntimeError):
    kind = "state"


class NumericError(SegminiError, FloatingPointError):
    kind = "numeric"
