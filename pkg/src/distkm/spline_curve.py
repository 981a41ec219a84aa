"""Spline parameterization of survival and at-risk curves.

Both curves are stored as coefficients of a link-transformed B-spline:
g(curve(t)) = coef . basis(t). Fitting is least squares of the linked
values on a dense time grid; evaluation inverts the link and uses the
analytic basis derivative for hazards.
"""

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import encoding
from ._kernels import basis_deriv_matrix, basis_matrix
from .errors import DomainError, FitError, ProtocolError, ValidationError

CLAMP_LO = 1e-6
CLAMP_HI = 1.0 - 1e-6

DEFAULT_GRID_SIZE = 200

ATRISK_FLOOR = 1e-4

PARAMS_VERSION = 1

LINKS = ("logit", "cloglog")


def clamp_probability(p):
    """Pull values into [1e-6, 1-1e-6] so link transforms stay finite."""
    return np.clip(p, CLAMP_LO, CLAMP_HI)


def _expit(eta):
    out = np.empty_like(eta, dtype=np.float64)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def link_apply(link, p):
    p = np.asarray(p, dtype=np.float64)
    if link == "logit":
        return np.log(p / (1.0 - p))
    if link == "cloglog":
        return np.log(-np.log(p))
    raise ValidationError(f"unknown link {link!r}; expected one of {LINKS}")


def link_inverse(link, eta):
    eta = np.asarray(eta, dtype=np.float64)
    if link == "logit":
        return _expit(eta)
    if link == "cloglog":
        return np.exp(-np.exp(eta))
    raise ValidationError(f"unknown link {link!r}; expected one of {LINKS}")


def link_inverse_deriv(link, eta):
    """d/d-eta of the inverse link."""
    eta = np.asarray(eta, dtype=np.float64)
    if link == "logit":
        s = _expit(eta)
        return s * (1.0 - s)
    if link == "cloglog":
        return -np.exp(eta - np.exp(eta))
    raise ValidationError(f"unknown link {link!r}; expected one of {LINKS}")


def default_grid(t_max, size=DEFAULT_GRID_SIZE):
    return np.linspace(0.0, t_max, size)


@dataclass(frozen=True)
class SplineParams:
    """Complete shareable state for one curve pair (survival + at-risk)."""

    knots: np.ndarray
    degree: int
    link: str
    beta_surv: np.ndarray
    beta_atrisk: np.ndarray
    n_cum: int
    t_max: float

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=np.float64))
        object.__setattr__(self, "beta_surv", np.asarray(self.beta_surv, dtype=np.float64))
        object.__setattr__(self, "beta_atrisk", np.asarray(self.beta_atrisk, dtype=np.float64))
        if self.degree < 2:
            raise ValidationError(f"spline degree must be >= 2, got {self.degree}")
        if self.link not in LINKS:
            raise ValidationError(f"unknown link {self.link!r}")
        if not (self.t_max > 0 and math.isfinite(self.t_max)):
            raise ValidationError(f"t_max must be a positive real, got {self.t_max}")
        if self.knots.size and (self.knots[0] <= 0 or self.knots[-1] >= self.t_max):
            raise ValidationError("knots must lie strictly inside (0, t_max)")
        if np.any(np.diff(self.knots) <= 0):
            raise ValidationError("knots must be strictly increasing")
        dim = self.basis_dim
        if self.beta_surv.shape != (dim,) or self.beta_atrisk.shape != (dim,):
            raise ValidationError(
                f"coefficient length must equal basis dimension {dim}, "
                f"got {self.beta_surv.shape[0]} / {self.beta_atrisk.shape[0]}"
            )
        if not (np.all(np.isfinite(self.beta_surv)) and np.all(np.isfinite(self.beta_atrisk))):
            raise ValidationError("coefficients must be finite")
        if self.n_cum < 0:
            raise ValidationError(f"n_cum must be nonnegative, got {self.n_cum}")

    @property
    def basis_dim(self):
        return self.knots.size + self.degree + 1

    def full_knots(self):
        return np.concatenate(
            [
                np.zeros(self.degree + 1),
                self.knots,
                np.full(self.degree + 1, self.t_max),
            ]
        )

    def with_coeffs(self, beta_surv=None, beta_atrisk=None, n_cum=None):
        return replace(
            self,
            beta_surv=self.beta_surv if beta_surv is None else beta_surv,
            beta_atrisk=self.beta_atrisk if beta_atrisk is None else beta_atrisk,
            n_cum=self.n_cum if n_cum is None else n_cum,
        )

    def to_dict(self):
        return {
            "version": PARAMS_VERSION,
            "link": self.link,
            "degree": self.degree,
            "t_max": encoding.fmt_float(self.t_max),
            "knots": encoding.fmt_floats(self.knots),
            "beta_surv": encoding.fmt_floats(self.beta_surv),
            "beta_atrisk": encoding.fmt_floats(self.beta_atrisk),
            "n_cum": encoding.fmt_int(self.n_cum),
        }

    @classmethod
    def from_dict(cls, d, path="params"):
        if d.get("version") != PARAMS_VERSION:
            raise ProtocolError(
                f"{path}.version: unsupported version {d.get('version')!r}",
                field_path=f"{path}.version",
            )
        try:
            params = cls(
                knots=np.array(encoding.parse_floats(d["knots"], f"{path}.knots")),
                degree=int(d["degree"]),
                link=d["link"],
                beta_surv=np.array(encoding.parse_floats(d["beta_surv"], f"{path}.beta_surv")),
                beta_atrisk=np.array(
                    encoding.parse_floats(d["beta_atrisk"], f"{path}.beta_atrisk")
                ),
                n_cum=encoding.parse_int(d["n_cum"], f"{path}.n_cum"),
                t_max=encoding.parse_float(d["t_max"], f"{path}.t_max"),
            )
        except KeyError as exc:
            raise ProtocolError(f"{path}.{exc.args[0]}: missing field", field_path=f"{path}.{exc.args[0]}") from exc
        except ValidationError as exc:
            field = "knots" if "knot" in str(exc) else "coefficients"
            raise ProtocolError(f"{path}.{field}: {exc}", field_path=f"{path}.{field}") from exc
        return params

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def basis_eval(t, knots, degree, t_max):
    """B-spline basis vector (or matrix for vector t) on [0, t_max]."""
    knots = np.asarray(knots, dtype=np.float64)
    scalar = np.ndim(t) == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0) or np.any(t_arr > t_max):
        bad = t_arr[(t_arr < 0) | (t_arr > t_max)][0]
        raise DomainError(f"evaluation time {bad} outside [0, {t_max}]")
    full = np.concatenate(
        [np.zeros(degree + 1), knots, np.full(degree + 1, t_max)]
    )
    b = basis_matrix(t_arr, full, degree)
    return b[0] if scalar else b


@dataclass(frozen=True)
class SplineFit:
    coef: np.ndarray
    rms: float


_GN_MAX_ITER = 50
_GN_STEP_TOL = 1e-11


def fit_spline(grid_times, grid_values, knots, degree, link, t_max, init_coef=None):
    """Least-squares spline regression of the linked values on the grid.

    Link-scale least squares is run with the standard GLM working
    weights (squared inverse-link derivative at the data), then refined
    by damped Gauss-Newton so the reported residual is the actual
    probability-scale least-squares optimum. Unweighted link-scale LS
    would let the clamped boundary values (g maps them to +-13.8)
    dominate the fit and ring across the whole curve.
    """
    grid_times = np.asarray(grid_times, dtype=np.float64)
    grid_values = np.asarray(grid_values, dtype=np.float64)
    if np.any(grid_values <= 0.0) or np.any(grid_values >= 1.0):
        raise ValidationError("grid values must be strictly inside (0, 1); clamp upstream")
    knots = np.asarray(knots, dtype=np.float64)
    dim = knots.size + degree + 1
    if grid_times.size < dim:
        raise ValidationError(
            f"grid length {grid_times.size} is below the basis dimension {dim}"
        )
    b = basis_eval(grid_times, knots, degree, t_max)
    full = np.concatenate([np.zeros(degree + 1), knots, np.full(degree + 1, t_max)])
    col_norms = np.linalg.norm(b, axis=0)
    empty = np.nonzero(col_norms < 1e-12)[0]
    if empty.size:
        i = int(empty[0])
        raise FitError(
            "ill-conditioned fit: no grid support for the basis function on knot span "
            f"[{full[i]:.6g}, {full[i + degree + 1]:.6g}]"
        )

    if init_coef is not None and np.shape(init_coef) == (dim,):
        coef = np.asarray(init_coef, dtype=np.float64).copy()
    else:
        eta_data = link_apply(link, grid_values)
        w = np.abs(link_inverse_deriv(link, eta_data))
        coef, _, rank, _ = np.linalg.lstsq(b * w[:, None], eta_data * w, rcond=None)
        if rank < dim:
            raise FitError(f"ill-conditioned fit: design rank {rank} < dimension {dim}")

    resid = grid_values - link_inverse(link, b @ coef)
    sse = float(resid @ resid)
    for _ in range(_GN_MAX_ITER):
        eta = b @ coef
        d = link_inverse_deriv(link, eta)
        # rcond cuts directions where the link has saturated; the
        # min-norm solution then leaves those coefficients untouched
        # instead of running them off to +-infinity for zero gain
        step = np.linalg.lstsq(b * d[:, None], resid, rcond=1e-7)[0]
        improved = False
        scale = 1.0
        for _ in range(12):
            trial = coef + scale * step
            resid_t = grid_values - link_inverse(link, b @ trial)
            sse_t = float(resid_t @ resid_t)
            if sse_t < sse:
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        coef, resid, sse = trial, resid_t, sse_t
        if float(np.max(np.abs(scale * step))) < _GN_STEP_TOL:
            break
    # convex hull of the basis bounds the curve by the coefficient range,
    # so clipping pins evaluations inside the clamp range for good
    bounds = sorted((float(link_apply(link, CLAMP_LO)), float(link_apply(link, CLAMP_HI))))
    coef = np.clip(coef, bounds[0], bounds[1])
    resid = grid_values - link_inverse(link, b @ coef)
    return SplineFit(coef=coef, rms=float(np.sqrt(np.mean(resid**2))))


class CurveView:
    """Evaluators for S, Y, hazard and S' derived from SplineParams."""

    def __init__(self, params):
        self.params = params
        self._full = params.full_knots()

    def _check(self, t):
        scalar = np.ndim(t) == 0
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t_arr < 0) or np.any(t_arr > self.params.t_max):
            bad = t_arr[(t_arr < 0) | (t_arr > self.params.t_max)][0]
            raise DomainError(f"evaluation time {bad} outside [0, {self.params.t_max}]")
        return t_arr, scalar

    def _value(self, t, coef):
        t_arr, scalar = self._check(t)
        eta = basis_matrix(t_arr, self._full, self.params.degree) @ coef
        v = link_inverse(self.params.link, eta)
        return float(v[0]) if scalar else v

    def survival(self, t):
        return self._value(t, self.params.beta_surv)

    def at_risk(self, t):
        return self._value(t, self.params.beta_atrisk)

    def survival_deriv(self, t):
        t_arr, scalar = self._check(t)
        b, db = basis_deriv_matrix(t_arr, self._full, self.params.degree)
        eta = b @ self.params.beta_surv
        d = link_inverse_deriv(self.params.link, eta) * (db @ self.params.beta_surv)
        return float(d[0]) if scalar else d

    def survival_and_hazard(self, t):
        t_arr, scalar = self._check(t)
        b, db = basis_deriv_matrix(t_arr, self._full, self.params.degree)
        eta = b @ self.params.beta_surv
        s = link_inverse(self.params.link, eta)
        ds = link_inverse_deriv(self.params.link, eta) * (db @ self.params.beta_surv)
        lam = -ds / s
        if scalar:
            return float(s[0]), float(lam[0])
        return s, lam

    def hazard(self, t):
        return self.survival_and_hazard(t)[1]


def curve_view(params):
    return CurveView(params)


def support_limit(params, floor=ATRISK_FLOOR):
    """Largest t in [0, t_max] with fitted at-risk value >= floor.

    Beyond this point 1/Y blows up, so all integrals truncate here.
    """
    view = CurveView(params)
    grid = np.linspace(0.0, params.t_max, 1024)
    y = view.at_risk(grid)
    above = np.nonzero(y >= floor)[0]
    if above.size == 0:
        return 0.0
    i = int(above[-1])
    if i == grid.size - 1:
        return float(params.t_max)
    lo, hi = grid[i], grid[i + 1]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if view.at_risk(np.array([mid]))[0] >= floor:
            lo = mid
        else:
            hi = mid
    return float(lo)


def fit_params(grid_times, surv_values, atrisk_values, knots, degree, link, t_max, n_cum):
    """Fit both curves and assemble SplineParams."""
    fit_s = fit_spline(grid_times, clamp_probability(surv_values), knots, degree, link, t_max)
    fit_y = fit_spline(grid_times, clamp_probability(atrisk_values), knots, degree, link, t_max)
    return SplineParams(
        knots=np.asarray(knots, dtype=np.float64),
        degree=degree,
        link=link,
        beta_surv=fit_s.coef,
        beta_atrisk=fit_y.coef,
        n_cum=n_cum,
        t_max=t_max,
    )


def augment_knots(params, new_knots, new_degree=None):
    """Re-express the curves on a richer basis (never coarser).

    Both curves are refit to dense-grid evaluations of themselves; the
    grid densifies with the basis dimension so every knot interval stays
    identified. n_cum is preserved.
    """
    new_knots = np.asarray(new_knots, dtype=np.float64)
    if new_degree is None:
        new_degree = params.degree
    new_dim = new_knots.size + new_degree + 1
    if new_dim < params.basis_dim:
        raise ValidationError(
            f"new basis dimension {new_dim} is below the current {params.basis_dim}"
        )
    if new_knots.size and (new_knots[0] <= 0 or new_knots[-1] >= params.t_max):
        raise ValidationError("new knots must lie strictly inside (0, t_max)")
    view = CurveView(params)
    grid = default_grid(params.t_max, size=max(DEFAULT_GRID_SIZE, 25 * new_dim))
    return fit_params(
        grid,
        view.survival(grid),
        view.at_risk(grid),
        new_knots,
        new_degree,
        params.link,
        params.t_max,
        params.n_cum,
    )


def insert_knots(params, additional):
    """Add knots by set union; the old curve lies exactly in the new space."""
    additional = np.atleast_1d(np.asarray(additional, dtype=np.float64))
    merged = np.sort(np.concatenate([params.knots, additional]))
    if np.any(np.diff(merged) <= 0):
        raise ValidationError("inserted knots must not coincide with existing ones")
    return augment_knots(params, merged, params.degree)


def plan_knot_additions(params, target_count):
    """Choose locations for new knots up to the target interior count.

    Survival-quantile candidates first; midpoints of the widest gaps
    when candidates sit too close to existing knots.
    """
    need = target_count - params.knots.size
    if need <= 0:
        return np.empty(0)
    min_sep = params.t_max / (DEFAULT_GRID_SIZE - 1)
    adds = []
    for c in knots_from_curve(params, target_count):
        if len(adds) == need:
            break
        pool = np.concatenate([params.knots, adds]) if adds else params.knots
        if np.min(np.abs(pool - c)) > min_sep:
            adds.append(float(c))
    while len(adds) < need:
        pool = np.sort(np.concatenate([[0.0], params.knots, adds, [params.t_max]]))
        gaps = np.diff(pool)
        i = int(np.argmax(gaps))
        adds.append(float(pool[i] + 0.5 * gaps[i]))
    return np.sort(np.array(adds))


def upgrade_degree(params, new_degree):
    """Raise the spline degree, bracketing old knots to absorb the
    smoothness-class change (the old curve is only C^(degree-1) there)."""
    if new_degree < params.degree:
        raise ValidationError("degree can only be raised")
    if new_degree == params.degree:
        return params
    bounds = np.concatenate([[0.0], params.knots, [params.t_max]])
    delta = 0.02 * float(np.min(np.diff(bounds)))
    mids = 0.5 * (params.knots[1:] + params.knots[:-1])
    merged = np.unique(
        np.concatenate([params.knots, params.knots - delta, params.knots + delta, mids])
    )
    merged = merged[(merged > 1e-3 * params.t_max) & (merged < (1 - 1e-3) * params.t_max)]
    return augment_knots(params, merged, new_degree)


# linked curves are log-singular where S -> 1 (left edge) and Y -> 0
# (right edge); geometric edge knots give the mesh resolution to track
# them, with the innermost left knot below the first dense-grid step so
# the boundary value can be interpolated outright
_EDGE_LEFT = (0.004, 0.015, 0.045, 0.12)
_EDGE_RIGHT = (0.996,)


def _edge_counts(n_knots):
    n_left = min(len(_EDGE_LEFT), max(1, n_knots // 3))
    n_right = min(len(_EDGE_RIGHT), max(0, n_knots - n_left - 1))
    return n_left, n_right


def place_knots(body_quantile, n_knots, t_max):
    """Edge-refined placement: geometric edge knots plus body quantiles.

    ``body_quantile(q)`` maps a probability in (0,1) to a body knot
    location (e.g. a quantile of observed follow-up times).
    """
    n_left, n_right = _edge_counts(n_knots)
    left = np.array(_EDGE_LEFT[:n_left]) * t_max
    right = np.array(_EDGE_RIGHT[:n_right]) * t_max
    n_body = n_knots - n_left - n_right
    qs = np.arange(1, n_body + 1) / (n_body + 1)
    body = np.clip(
        np.array([body_quantile(q) for q in qs]),
        (_EDGE_LEFT[n_left - 1] + 0.02) * t_max,
        (_EDGE_RIGHT[0] - 0.02) * t_max,
    )
    return _clean_knots(np.concatenate([left, body, right]), n_knots, t_max)


def knots_from_quantiles(values, n_knots, t_max):
    """Edge-refined knots with body knots at follow-up-time quantiles."""
    values = np.asarray(values, dtype=np.float64)
    return place_knots(lambda q: float(np.quantile(values, q)), n_knots, t_max)


def knots_from_curve(params, n_knots):
    """Edge-refined knots with body knots at survival quantiles of the curve."""
    view = CurveView(params)
    grid = np.linspace(0.0, params.t_max, 1024)
    s = np.minimum.accumulate(view.survival(grid))

    def body_quantile(q):
        level = s[0] + (s[-1] - s[0]) * q
        return float(np.interp(level, s[::-1], grid[::-1]))

    return place_knots(body_quantile, n_knots, params.t_max)


def _clean_knots(raw, n_knots, t_max):
    lo = 1e-3 * t_max
    hi = (1.0 - 1e-3) * t_max
    qs = np.clip(np.sort(np.asarray(raw, dtype=np.float64)), lo, hi)
    # a knot interval narrower than one refit-grid step starves its basis
    # column of grid support; fall back to uniform spacing if separation
    # cannot be restored inside the domain
    eps = t_max / (DEFAULT_GRID_SIZE - 1)
    for i in range(1, qs.size):
        if qs[i] - qs[i - 1] < eps:
            qs[i] = qs[i - 1] + eps
    if qs.size and qs[-1] > hi:
        qs = np.linspace(lo, hi, n_knots + 2)[1:-1]
    return qs
