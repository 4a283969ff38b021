"""Exception types shared across the package."""


class CeluError(Exception):
    pass


class ShapeError(CeluError, ValueError):
    pass


class ConfigError(CeluError, ValueError):
    pass


class DataError(CeluError, ValueError):
    pass


class ParseError(DataError):
    pass


class NumericError(CeluError, ArithmeticError):
    pass


class ProtocolError(CeluError):
    pass


class ChannelClosed(CeluError):
    pass


class WorksetError(CeluError, LookupError):
    pass


class MetricError(CeluError, ValueError):
    pass
