"""Exception types shared across the lab."""


class LabError(Exception):
    pass


class DimensionError(LabError, ValueError):
    """Operand shapes do not agree."""


class ContractError(LabError, ValueError):
    """A documented precondition was violated."""


class ParameterError(LabError, ValueError):
    pass


class PrecisionError(LabError, ArithmeticError):
    """The requested computation cannot be represented in float64 without collisions."""


class ParseError(LabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(LabError, ValueError):
    pass


class TrainingDiverged(LabError, RuntimeError):
    pass
