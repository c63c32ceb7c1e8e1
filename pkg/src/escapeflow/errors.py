"""Exception types raised across the package."""


class EscapeFlowError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(EscapeFlowError, ValueError):
    pass


class EvaluationError(EscapeFlowError):
    """An evaluator returned a non-finite value."""

    def __init__(self, evaluator, x, t, detail=""):
        self.evaluator = evaluator
        self.x = x
        self.t = t
        msg = f"{evaluator} produced a non-finite value at x={list(map(float, x))}, t={t}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class RankDeficiencyError(EscapeFlowError):
    """Constraint Jacobian lost full row rank (Assumption 3: 'has full row-rank')."""

    def __init__(self, x, t, sigma_min, threshold):
        self.x = x
        self.t = t
        self.sigma_min = sigma_min
        self.threshold = threshold
        super().__init__(
            f"constraint Jacobian has no full row-rank at t={t}: "
            f"smallest Gram eigenvalue {sigma_min:.3e} < {threshold:.3e}"
        )


class PreconditionError(EscapeFlowError, ValueError):
    pass


class RetractionError(EscapeFlowError):
    """Newton retraction onto the feasible set did not converge."""


class ConvergenceError(EscapeFlowError):
    """An iterative solver exhausted its iteration budget."""


class BranchLossError(EscapeFlowError):
    """Continuation jumped off the branch it was following."""


class SamplingError(EscapeFlowError):
    pass


class CertificateRefusal(EscapeFlowError):
    """A certificate was requested from inputs that cannot support it."""


class ScenarioError(EscapeFlowError, ValueError):
    """Scenario file failed validation; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class FlowAborted(EscapeFlowError):
    """Integration stopped early. ``record`` holds the samples produced so far."""

    def __init__(self, message, record, cause=None):
        self.record = record
        self.cause = cause
        super().__init__(message)
