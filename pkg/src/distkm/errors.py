"""Exception and warning types shared across the package."""


class DistKMError(Exception):
    """Base class for all package errors."""


class ValidationError(DistKMError):
    """Input data or configuration violates a documented precondition."""


class DomainError(DistKMError):
    """Evaluation requested outside the curve domain [0, t_max]."""


class FitError(DistKMError):
    """Spline regression failed (rank-deficient or ill-conditioned design)."""


class IntegrationError(DistKMError):
    """Integrand returned NaN/inf; carries the offending abscissa."""

    def __init__(self, message, abscissa=None):
        super().__init__(message)
        self.abscissa = abscissa


class TailSupportError(DistKMError):
    """Observation lies beyond the estimable support (at-risk floor)."""


class ConvergenceError(DistKMError):
    """Iterative fit failed to converge (e.g. separated logistic data)."""


class DesignError(DistKMError):
    """Regression design matrix is rank deficient."""


class InitializationError(DistKMError):
    """Leading site cannot support the initial spline fit."""


class ProtocolError(DistKMError):
    """Site message failed schema or invariant validation.

    ``field_path`` names the offending field, e.g.
    ``group_params.overall.knots``.
    """

    def __init__(self, message, field_path=None):
        super().__init__(message)
        self.field_path = field_path


class FixedTimepointError(ValidationError):
    """Weighted CI requested at a time not in the prespecified set."""


class DegenerateStatisticError(DistKMError):
    """A variance or test statistic is undefined (zero/negative denominator)."""


class DegenerateCIWarning(UserWarning):
    """Survival estimate sits at a clamp boundary; CI collapses to a point."""


class ClampWarning(UserWarning):
    """Propensity scores were clamped before inversion into weights."""
