"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class KpeflowError(Exception):
    exit_code = 1


class ValidationError(KpeflowError, ValueError):
    exit_code = 2


class DomainError(ValidationError):
    """Input is well-formed but outside the mathematical domain (e.g. not SPD)."""


class IntegrityError(KpeflowError):
    exit_code = 3


class NumericError(KpeflowError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class IntegrationError(NumericError):
    def __init__(self, message, step=None, index=None):
        where = []
        if index is not None:
            where.append(f"trajectory {index}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.step = step
        self.index = index
