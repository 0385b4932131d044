"""Exception types raised across the package."""


class ReIDError(Exception):
    """Base class for all package errors."""


class InputError(ReIDError, ValueError):
    pass


class ShapeError(InputError):
    pass


class PairingError(InputError):
    pass


class ConfigError(ReIDError, ValueError):
    pass


class DatasetError(ReIDError):
    pass


class SamplingError(DatasetError):
    pass


class NumericError(ReIDError, ArithmeticError):
    pass


class ProtocolError(ReIDError, ValueError):
    pass


class VersionError(ReIDError):
    pass
