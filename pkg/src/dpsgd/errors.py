"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (also maps to CLI exit code 2)."""


class DomainError(ValueError):
    """A numeric argument lies outside the mathematical domain of an operation."""


class InvalidOrderError(DomainError):
    """Renyi order is not an integer >= 2."""


class CalibrationError(RuntimeError):
    """A calibration search could not bracket a feasible value."""


class PartitionError(ValueError):
    """Contributions do not match the batch geometry."""


class SensitivityError(ValueError):
    """A per-example contribution exceeds unit norm."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ShapeError(ValueError):
    """Array shapes are incompatible."""


class IdxParseError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
