"""Exception hierarchy shared by the library and the CLI exit-code contract."""


class TembedError(Exception):
    exit_code = 1


class ConfigError(TembedError, ValueError):
    """Invalid configuration, shape mismatch or violated precondition."""

    exit_code = 2


class NumericalError(TembedError, ArithmeticError):
    """A computation produced non-finite values."""

    exit_code = 3


class DivergenceError(NumericalError):
    exit_code = 4

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class StiffnessError(NumericalError):
    """Adaptive solver gave up; ``partial`` holds the SolveResult reached so far."""

    exit_code = 5

    def __init__(self, message: str, partial=None):
        self.partial = partial
        super().__init__(message)
