"""Exception hierarchy.

Input problems (bad files, invalid networks) derive from ``InputError``;
everything that goes wrong inside a numerical routine derives from
``NumericalError``. The CLI maps the two families to exit codes 2 and 1.
"""


class InputError(ValueError):
    pass


class CaseParseError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NetworkValidationError(InputError):
    pass


class NumericalError(RuntimeError):
    pass


class PowerFlowError(NumericalError):
    def __init__(self, message, mismatch=None, iterations=None):
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(message)


class SingularJacobianError(NumericalError):
    pass


class RegularityError(NumericalError):
    """The algebraic Jacobian is singular: the index-1 assumption fails."""

    def __init__(self, message, state=None):
        self.state = state
        super().__init__(message)


class InitializationError(NumericalError):
    pass


class NewtonConvergenceError(NumericalError):
    def __init__(self, message, residual=None, step=None):
        self.residual = residual
        self.step = step
        super().__init__(message)


class StepError(NumericalError):
    """A simulation step failed; ``step`` is the index of the state being solved."""

    def __init__(self, message, step, cause=None):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step}: {message}")
