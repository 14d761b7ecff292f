class NumericalError(RuntimeError):
    """A computation ran but its numerics cannot be trusted (exit status 3)."""


class ExplodedPathError(NumericalError):
    def __init__(self, message, n_exploded=0, first_index=None):
        super().__init__(message)
        self.n_exploded = n_exploded
        self.first_index = first_index


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
