"""Exception hierarchy shared by the library and the command line front end."""


class UsageError(ValueError):
    """Invalid arguments, unknown names or inconsistent configuration."""


class NumericError(ArithmeticError):
    """A numerical routine failed (overflow, non-convergence, non-finite output)."""


class ConvViolation(NumericError):
    """The mean of min Spec(Hess V) under the equilibrium measure is not positive."""

    def __init__(self, mean_phi):
        super().__init__(f"integral of phi against pi_0 is {mean_phi!r} <= 0")
        self.mean_phi = mean_phi


class DivergenceError(RuntimeError):
    """Too many replicas left the finite range to form an estimate."""

    def __init__(self, message, n_diverged=0, n_total=0):
        super().__init__(message)
        self.n_diverged = n_diverged
        self.n_total = n_total
