"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration or argument combination."""


class GenotypeParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (position {position})")
        self.position = position


class NumericError(ArithmeticError):
    """NaN or infinite values where finite ones are required."""


class InsufficientDataError(ValueError):
    pass


class CheckpointError(ValueError):
    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class IngestionError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")
        self.offset = offset


class InvariantViolation(RuntimeError):
    """An internal contract was broken during a run; the run is aborted."""
