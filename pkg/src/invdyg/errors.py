"""Exception hierarchy. The CLI maps each family onto a process exit code."""


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class DataValidationError(ValueError):
    """Input data violates the cohort schema or a record contract (exit code 3)."""


class SchemaError(DataValidationError):
    pass


class UniquenessError(DataValidationError):
    pass


class SplitError(DataValidationError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite values appeared during a forward pass (exit code 4)."""


class TrainingError(NumericalError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


EXIT_CODES = {
    ConfigError: 2,
    DataValidationError: 3,
    NumericalError: 4,
}


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 1
