"""Exception hierarchy of glmmtool.

User-facing input problems derive from :class:`ConfigError` (an ``AssertionError``, the convention used for input
validation throughout the package) and map to exit code 1 in the CLI. Numerical failures derive from
:class:`NumericalError` and map to exit code 2. Non-convergence maps to exit code 3.
"""


class GlmmError(Exception):
    """Base class of every error raised by glmmtool."""
    exit_code = 2


class ConfigError(GlmmError, AssertionError):
    exit_code = 1


class NelderSyntaxError(ConfigError):
    def __init__(self, message: str, text: str, position: int):
        self.text = text
        self.position = position
        super().__init__(f"{message} at position {position}\n    {text}\n    {' ' * position}^")


class DesignSizeError(ConfigError):
    pass


class FormulaError(ConfigError):
    pass


class ParameterError(ConfigError):
    pass


class NumericalError(GlmmError, ArithmeticError):
    exit_code = 2


class CovarianceError(NumericalError):
    def __init__(self, message: str, block: int = None, pivot: float = None):
        self.block = block
        self.pivot = pivot
        if block is not None:
            message = f"{message} (block {block}, pivot {pivot:.3e})"
        super().__init__(message)


class SingularMatrixError(NumericalError):
    def __init__(self, message: str, columns: list = None):
        self.columns = list(columns) if columns else []
        if self.columns:
            message = f"{message}; candidate columns: {', '.join(str(c) for c in self.columns)}"
        super().__init__(message)


class DegenerateDesignError(SingularMatrixError):
    pass


class SupportError(NumericalError):
    pass


class SamplerError(NumericalError):
    pass


class EffectiveSampleSizeError(NumericalError):
    def __init__(self, ess: float, minimum: float):
        self.ess = ess
        self.minimum = minimum
        super().__init__(f"Effective sample size {ess:.2f} of the importance weights is below {minimum}. "
                         f"Draw more samples before refining with the simulated likelihood.")


class HessianError(NumericalError):
    def __init__(self, eigenvalues):
        self.eigenvalues = eigenvalues
        super().__init__(f"Hessian of the simulated log-likelihood is not negative definite; "
                         f"eigenvalues of the negated Hessian: {list(eigenvalues)}")


class ConvergenceError(GlmmError):
    exit_code = 3

    def __init__(self, message: str, result=None):
        self.result = result
        super().__init__(message)
