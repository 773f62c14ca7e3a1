"""Exception types shared across the toolkit."""


class AbyssError(Exception):
    """Base class for all toolkit errors."""


class InvalidDataError(AbyssError):
    """Raster contains non-finite or otherwise unusable values."""


class DomainError(AbyssError):
    """Argument outside the documented domain (e.g. value not in [0, 1])."""


class ShapeError(AbyssError):
    """Array dimensions incompatible with the requested operation."""


class PartitionError(AbyssError):
    """Block size does not tile the grid exactly."""


class ParseError(AbyssError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(AbyssError):
    """Invalid configuration value or override."""


class StateError(AbyssError):
    """Operation requires state the object does not have yet."""


class CalibrationError(AbyssError):
    """Calibration pass cannot produce valid interval widths."""

    def __init__(self, message: str, deficient_blocks=None):
        super().__init__(message)
        self.deficient_blocks = deficient_blocks or []


class TrainingDivergedError(AbyssError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, step: int, ema_snapshot=None):
        super().__init__(message)
        self.step = step
        self.ema_snapshot = ema_snapshot
