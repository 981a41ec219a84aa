"""Distributed Kaplan-Meier estimation via sequential influence-function updates.

Curves travel between sites as low-dimensional spline parameters; each
site shifts them with the influence of its own observations and passes
them on, so individual-level data never leaves a site. Includes IPW
weighting via a renewable propensity fit, distributed confidence
intervals, and (weighted) log-rank tests computed from shared state only.
"""

from .errors import (
    ClampWarning,
    ConvergenceError,
    DegenerateCIWarning,
    DegenerateStatisticError,
    DesignError,
    DistKMError,
    DomainError,
    FitError,
    FixedTimepointError,
    InitializationError,
    IntegrationError,
    ProtocolError,
    TailSupportError,
    ValidationError,
)
from .federation import (
    FederationConfig,
    Site,
    SiteDataset,
    SiteMessage,
    deserialize_message,
    field_inventory,
    run_ipw,
    run_unweighted,
    serialize_message,
)
from .inference import (
    GROUPS,
    InferenceAccumulators,
    StudyResult,
    accumulate_weighted_ci,
    ci_loglog,
    logrank_distributed,
    var_loglog,
    weighted_ci,
    weighted_logrank,
)
from .influence import (
    UpdateBatch,
    UpdateDiagnostics,
    influence_at,
    update_batch,
    update_single,
    update_weighted,
    update_weighted_batch,
)
from .quadrature import IntegrationPolicy, integrate, integrate_batch
from .renewable_glm import (
    PropensityState,
    propensity_init,
    propensity_update,
    weights_for,
)
from .simgen import Scenario, SimMetrics, evaluate, generate, make_scenario, true_survival
from .spline_curve import (
    CurveView,
    SplineParams,
    augment_knots,
    basis_eval,
    curve_view,
    fit_spline,
    knots_from_quantiles,
    support_limit,
)
from .surv_core import (
    StepCurve,
    SurvivalRecord,
    greenwood_discrete,
    km_fit,
    km_fit_weighted,
    logrank_discrete,
    read_records_csv,
    write_records_csv,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
