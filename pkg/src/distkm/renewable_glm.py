"""Sequential (renewable) logistic propensity model.

Site 1 fits an ordinary Newton-Raphson MLE; later sites solve the
renewable estimating equation combining their local score with the
aggregated information carried forward, so coefficients converge to the
pooled MLE without any site seeing another's data.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import encoding
from .errors import ClampWarning, ConvergenceError, DesignError, ProtocolError, ValidationError
from .spline_curve import _expit
from .surv_core import as_arrays, validate_records

SCORE_TOL = 1e-8
MAX_ITER = 50
PROPENSITY_CLAMP = (0.01, 0.99)


@dataclass(frozen=True)
class PropensityState:
    """Coefficients plus aggregated information; all a site needs to continue."""

    coef: np.ndarray
    cum_info: np.ndarray
    n_cum: int

    def __post_init__(self):
        object.__setattr__(self, "coef", np.asarray(self.coef, dtype=np.float64))
        object.__setattr__(self, "cum_info", np.asarray(self.cum_info, dtype=np.float64))
        d = self.coef.shape[0]
        if self.cum_info.shape != (d, d):
            raise ValidationError("cum_info dimensions must match coefficient length")
        if not np.all(np.isfinite(self.coef)):
            raise ValidationError("propensity coefficients must be finite")
        if not np.allclose(self.cum_info, self.cum_info.T, atol=1e-8):
            raise ValidationError("cum_info must be symmetric")

    def to_dict(self):
        return {
            "coef": encoding.fmt_floats(self.coef),
            "cum_info": encoding.fmt_floats(self.cum_info.ravel()),
            "n_cum": encoding.fmt_int(self.n_cum),
        }

    @classmethod
    def from_dict(cls, d, path="propensity"):
        coef = np.array(encoding.parse_floats(d.get("coef"), f"{path}.coef"))
        flat = np.array(encoding.parse_floats(d.get("cum_info"), f"{path}.cum_info"))
        k = coef.shape[0]
        if flat.shape[0] != k * k:
            raise ProtocolError(
                f"{path}.cum_info: expected {k * k} entries, got {flat.shape[0]}",
                field_path=f"{path}.cum_info",
            )
        try:
            return cls(coef=coef, cum_info=flat.reshape(k, k), n_cum=encoding.parse_int(d.get("n_cum"), f"{path}.n_cum"))
        except ValidationError as exc:
            raise ProtocolError(f"{path}: {exc}", field_path=path) from exc


def _design(records):
    validate_records(records)
    _, _, a, z, _ = as_arrays(records)
    if np.any(a < 0):
        raise ValidationError("propensity model requires an arm for every record")
    x = np.column_stack([np.ones(len(records)), z])
    return x, a.astype(np.float64)


def _check_rank(x):
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise DesignError("propensity design matrix is rank deficient")


def propensity_init(records):
    """Logistic MLE on the leading site's data."""
    x, y = _design(records)
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValidationError("both arm values must be present to fit the propensity model")
    _check_rank(x)
    beta = np.zeros(x.shape[1])
    for _ in range(MAX_ITER):
        p = _expit(x @ beta)
        score = x.T @ (y - p)
        if np.linalg.norm(score) < SCORE_TOL:
            info = x.T @ (x * (p * (1.0 - p))[:, None])
            return PropensityState(coef=beta, cum_info=info, n_cum=len(records))
        w = p * (1.0 - p)
        info = x.T @ (x * w[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("information matrix is singular (separated data?)") from exc
        beta = beta + step
        if np.max(np.abs(beta)) > 100:
            raise ConvergenceError("propensity coefficients diverged (separated data?)")
    raise ConvergenceError(f"propensity fit did not converge in {MAX_ITER} iterations")


def propensity_update(state, records):
    """Renewable Newton update: local score plus information-weighted drift."""
    if not records:
        return state
    x, y = _design(records)
    if x.shape[1] != state.coef.shape[0]:
        raise ValidationError(
            f"covariate dimension changed: design has {x.shape[1]} columns, "
            f"state has {state.coef.shape[0]}"
        )
    beta = state.coef.copy()
    for _ in range(MAX_ITER):
        p = _expit(x @ beta)
        g = x.T @ (y - p) + state.cum_info @ (state.coef - beta)
        if np.linalg.norm(g) < SCORE_TOL:
            info_new = x.T @ (x * (p * (1.0 - p))[:, None])
            return PropensityState(
                coef=beta,
                cum_info=state.cum_info + info_new,
                n_cum=state.n_cum + len(records),
            )
        j = state.cum_info + x.T @ (x * (p * (1.0 - p))[:, None])
        try:
            step = np.linalg.solve(j, g)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("renewable information matrix is singular") from exc
        beta = beta + step
        if np.max(np.abs(beta)) > 100:
            raise ConvergenceError("propensity coefficients diverged (separated data?)")
    raise ConvergenceError(f"renewable update did not converge in {MAX_ITER} iterations")


def weights_for(records, state):
    """Inverse propensity weights, with scores clamped to [0.01, 0.99]."""
    x, y = _design(records)
    if x.shape[1] != state.coef.shape[0]:
        raise ValidationError("covariate dimension does not match the fitted state")
    p = _expit(x @ state.coef)
    lo, hi = PROPENSITY_CLAMP
    clamped = int(np.sum((p < lo) | (p > hi)))
    if clamped:
        warnings.warn(
            f"{clamped} propensity value(s) clamped to [{lo}, {hi}] before inversion",
            ClampWarning,
            stacklevel=2,
        )
    p = np.clip(p, lo, hi)
    return np.where(y == 1, 1.0 / p, 1.0 / (1.0 - p))
