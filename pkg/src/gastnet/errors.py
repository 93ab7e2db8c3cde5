"""Exception types raised across the package."""


class GastError(Exception):
    """Base class; the CLI turns these into one-line diagnostics."""


class ShapeError(GastError, ValueError):
    pass


class NonFiniteError(GastError, FloatingPointError):
    pass


class TapeError(GastError, RuntimeError):
    pass


class ConfigError(GastError, ValueError):
    pass


class CheckpointError(GastError, ValueError):
    pass


class DataError(GastError, ValueError):
    pass
