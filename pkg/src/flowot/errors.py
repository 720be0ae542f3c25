"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NonFiniteError(FloatingPointError):
    """A numeric operation produced NaN or infinity."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class TapeReuseError(RuntimeError):
    """backward() was called twice on the same tape."""


class TrainingDiverged(RuntimeError):
    """Training aborted after repeated non-finite losses."""

    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"training diverged at iteration {iteration}")


class SingularityError(ValueError):
    """A matrix that must be invertible is numerically singular."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class DegenerateDistributionError(ValueError):
    """A sample set has (near-)zero variance or a singular covariance fit."""


class ConfigError(ValueError):
    """An experiment config file failed validation."""
