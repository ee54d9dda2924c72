"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class SimulationError(ValueError):
    """A simulation input was rejected (e.g. non-finite state)."""


class ShapeError(ValueError):
    """Tensor shape does not match what a layer or model expects."""


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""


class ArmDroppedError(RuntimeError):
    """Planning was requested after the box has already been dropped."""


class TraceParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
