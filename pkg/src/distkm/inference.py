"""Confidence intervals and tests from shared state only.

Unweighted CIs integrate the continuous Greenwood approximation over the
fitted curves; weighted CIs and the weighted log-rank test consume the
additive squared-influence accumulators collected during the second
pass. Nothing here ever touches individual records from other sites.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import encoding
from .errors import (
    DegenerateCIWarning,
    DegenerateStatisticError,
    FixedTimepointError,
    ProtocolError,
    ValidationError,
)
from .influence import influence_matrix
from .quadrature import IntegrationPolicy, integrate, integrate_batch
from .spline_curve import ATRISK_FLOOR, CurveView, support_limit
from .surv_core import chi2_sf_1df, norm_p_two_sided

GROUPS = ("arm0", "arm1", "overall")

Z_95 = 1.96

# survival this close to the value clamp has no usable log(-log) scale
_DEGENERATE_EPS = 2e-6

# the Greenwood integrand's (1 - hazard)^-1 factor is a tie correction
# derived for a discrete jump hazard << 1; a fitted continuous RATE can
# exceed 1 near steep starts (Weibull shape < 1), where the factor loses
# meaning and would explode the variance, so the correction is bounded at 2x
_HAZARD_CLIP_HI = 0.5


@dataclass
class InferenceAccumulators:
    """Running sums that travel with the message; additive across sites."""

    eval_times: np.ndarray
    sum_w2_psi2_surv: dict = field(default_factory=dict)
    sum_w2_psi2_logrank: float = 0.0
    n_treated: int = 0
    n_total: int = 0
    sum_w: dict = field(default_factory=dict)
    sum_w2: dict = field(default_factory=dict)
    n: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, eval_times, groups=GROUPS):
        eval_times = np.asarray(eval_times, dtype=np.float64)
        return cls(
            eval_times=eval_times,
            sum_w2_psi2_surv={g: np.zeros(eval_times.size) for g in groups},
            sum_w={g: 0.0 for g in groups},
            sum_w2={g: 0.0 for g in groups},
            n={g: 0 for g in groups},
        )

    def count_arms(self, records):
        """Tally treated/total during the first pass (needed for p-hat)."""
        self.n_total += len(records)
        self.n_treated += sum(1 for r in records if r.arm == 1)

    def to_dict(self):
        groups = sorted(self.sum_w2_psi2_surv)
        return {
            "eval_times": encoding.fmt_floats(self.eval_times),
            "sum_w2_psi2_surv": {g: encoding.fmt_floats(self.sum_w2_psi2_surv[g]) for g in groups},
            "sum_w2_psi2_logrank": encoding.fmt_float(self.sum_w2_psi2_logrank),
            "n_treated": encoding.fmt_int(self.n_treated),
            "n_total": encoding.fmt_int(self.n_total),
            "sum_w": {g: encoding.fmt_float(self.sum_w[g]) for g in groups},
            "sum_w2": {g: encoding.fmt_float(self.sum_w2[g]) for g in groups},
            "n": {g: encoding.fmt_int(self.n[g]) for g in groups},
        }

    @classmethod
    def from_dict(cls, d, path="accumulators"):
        eval_times = np.array(encoding.parse_floats(d.get("eval_times"), f"{path}.eval_times"))
        surv = d.get("sum_w2_psi2_surv")
        if not isinstance(surv, dict):
            raise ProtocolError(f"{path}.sum_w2_psi2_surv: expected a mapping", field_path=f"{path}.sum_w2_psi2_surv")
        acc = cls(
            eval_times=eval_times,
            sum_w2_psi2_surv={
                g: np.array(encoding.parse_floats(v, f"{path}.sum_w2_psi2_surv.{g}"))
                for g, v in surv.items()
            },
            sum_w2_psi2_logrank=encoding.parse_float(
                d.get("sum_w2_psi2_logrank"), f"{path}.sum_w2_psi2_logrank"
            ),
            n_treated=encoding.parse_int(d.get("n_treated"), f"{path}.n_treated"),
            n_total=encoding.parse_int(d.get("n_total"), f"{path}.n_total"),
            sum_w={g: encoding.parse_float(v, f"{path}.sum_w.{g}") for g, v in d.get("sum_w", {}).items()},
            sum_w2={g: encoding.parse_float(v, f"{path}.sum_w2.{g}") for g, v in d.get("sum_w2", {}).items()},
            n={g: encoding.parse_int(v, f"{path}.n.{g}") for g, v in d.get("n", {}).items()},
        )
        for g, arr in acc.sum_w2_psi2_surv.items():
            if arr.shape != eval_times.shape:
                raise ProtocolError(
                    f"{path}.sum_w2_psi2_surv.{g}: length mismatch with eval_times",
                    field_path=f"{path}.sum_w2_psi2_surv.{g}",
                )
            if np.any(arr < 0):
                raise ProtocolError(
                    f"{path}.sum_w2_psi2_surv.{g}: negative sum", field_path=f"{path}.sum_w2_psi2_surv.{g}"
                )
        if acc.sum_w2_psi2_logrank < 0:
            raise ProtocolError(f"{path}.sum_w2_psi2_logrank: negative sum", field_path=f"{path}.sum_w2_psi2_logrank")
        return acc


def var_loglog(params, t, policy=IntegrationPolicy()):
    """Continuous Greenwood: variance of log(-log S(t)) from the fitted curves."""
    if params.n_cum < 1:
        raise ValidationError("variance requires a curve with n_cum >= 1")
    view = CurveView(params)
    s = view.survival(float(t))
    if s >= 1.0 - _DEGENERATE_EPS or s <= _DEGENERATE_EPS:
        warnings.warn(
            f"survival estimate {s:.8f} at t={t} sits at a clamp boundary; CI collapses",
            DegenerateCIWarning,
            stacklevel=2,
        )
        return 0.0
    ub = min(float(t), support_limit(params))

    def f(u):
        su, lam = view.survival_and_hazard(u)
        lam = np.clip(lam, 0.0, _HAZARD_CLIP_HI)
        return lam / (view.at_risk(u) * (1.0 - lam))

    val = integrate(f, 0.0, ub, policy)
    return float(val / (params.n_cum * math.log(s) ** 2))


def ci_loglog(params, t, policy=IntegrationPolicy()):
    """(estimate, lower, upper) 95% CI on the log(-log) scale."""
    view = CurveView(params)
    s = view.survival(float(t))
    v = var_loglog(params, t, policy)
    if v == 0.0:
        return s, s, s
    theta = math.log(-math.log(s))
    half = Z_95 * math.sqrt(v)
    lo = math.exp(-math.exp(theta + half))
    hi = math.exp(-math.exp(theta - half))
    return s, min(lo, s), max(hi, s)


def _common_support(*params_list):
    return min(support_limit(p) for p in params_list)


def _observed_expected(params_k, params_all, n_k, cap, policy):
    view_k = CurveView(params_k)
    view_all = CurveView(params_all)

    def fo(u):
        _, lam = view_k.survival_and_hazard(u)
        return view_k.at_risk(u) * np.clip(lam, 0.0, None)

    def fe(u):
        _, lam = view_all.survival_and_hazard(u)
        return view_k.at_risk(u) * np.clip(lam, 0.0, None)

    return n_k * integrate(fo, 0.0, cap, policy), n_k * integrate(fe, 0.0, cap, policy)


def logrank_distributed(params_g1, params_g2, params_all, n1, n2, policy=IntegrationPolicy()):
    """Two-sample log-rank approximated from curve parameters alone."""
    cap = _common_support(params_g1, params_g2, params_all)
    o1, e1 = _observed_expected(params_g1, params_all, n1, cap, policy)
    o2, e2 = _observed_expected(params_g2, params_all, n2, cap, policy)
    if e1 <= 0 or e2 <= 0:
        raise DegenerateStatisticError("expected event count is nonpositive; test undefined")
    stat = (o1 - e1) ** 2 / e1 + (o2 - e2) ** 2 / e2
    return float(stat), chi2_sf_1df(stat)


def accumulate_weighted_ci(acc, record, weight, params, policy=IntegrationPolicy(), group="overall", atrisk_floor=ATRISK_FLOOR):
    """Add one record's w^2 psi^2 contribution for a group curve."""
    return accumulate_weighted_ci_batch(
        acc, [record], np.array([weight]), params, policy, group, atrisk_floor
    )


def accumulate_weighted_ci_batch(acc, records, weights, params, policy=IntegrationPolicy(), group="overall", atrisk_floor=ATRISK_FLOOR):
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValidationError("weights must be positive")
    if group not in acc.sum_w2_psi2_surv:
        raise ValidationError(f"unknown group {group!r}")
    # one record at a time so each psi-hat is identical no matter how the
    # records were partitioned into sites (sums must be exactly additive)
    psi = np.vstack(
        [
            influence_matrix([r], params, acc.eval_times, policy, atrisk_floor)[0]
            for r in records
        ]
    )
    acc.sum_w2_psi2_surv[group] += (weights**2) @ (psi**2)
    acc.sum_w[group] += float(weights.sum())
    acc.sum_w2[group] += float((weights**2).sum())
    acc.n[group] += len(records)
    return acc


def logrank_influence(records, params_treated, params_all, p_hat, policy=IntegrationPolicy(), atrisk_floor=ATRISK_FLOOR):
    """psi-hat of the normalized log-rank numerator L for each record."""
    view_all = CurveView(params_all)
    view_1 = CurveView(params_treated)
    cap = support_limit(params_all, floor=atrisk_floor)

    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=np.float64)
    a = np.array([1.0 if r.arm == 1 else 0.0 for r in records])
    if any(r.arm is None for r in records):
        raise ValidationError("weighted log-rank accumulation requires an arm for every record")

    def hazard_all(u):
        _, lam = view_all.survival_and_hazard(u)
        return lam

    def cross(u):
        _, lam = view_all.survival_and_hazard(u)
        return lam * view_1.at_risk(u) * p_hat / view_all.at_risk(u)

    # per-record integrals keep the accumulated sums exactly additive
    # across any partition of the records into sites
    x_clip = np.minimum(t, cap)
    g1 = np.array([integrate_batch(hazard_all, x_clip[k : k + 1], policy)[0] for k in range(t.size)])
    g2 = np.array([integrate_batch(cross, x_clip[k : k + 1], policy)[0] for k in range(t.size)])

    t_dom = np.minimum(t, params_all.t_max)
    ratio = view_1.at_risk(t_dom) * p_hat / view_all.at_risk(t_dom)
    return e * (a - ratio) - (a * g1 - g2)


def accumulate_weighted_logrank(acc, records, weights, params_treated, params_all, policy=IntegrationPolicy(), atrisk_floor=ATRISK_FLOOR):
    """Add w^2 psi(L)^2 for a site's records during the second pass."""
    if acc.n_total <= 0:
        raise ValidationError("arm counts must be accumulated before psi(L)")
    weights = np.asarray(weights, dtype=np.float64)
    p_hat = acc.n_treated / acc.n_total
    psi = logrank_influence(records, params_treated, params_all, p_hat, policy, atrisk_floor)
    acc.sum_w2_psi2_logrank += float(np.sum(weights**2 * psi**2))
    return acc


def _match_eval_time(acc, t):
    close = np.nonzero(np.abs(acc.eval_times - t) <= 1e-9 * max(1.0, abs(t)))[0]
    if close.size == 0:
        raise FixedTimepointError(
            f"t={t} is not one of the prespecified CI times; weighted CIs require "
            "fixed time points"
        )
    return int(close[0])


def weighted_ci(acc, params, t, group="overall"):
    """(estimate, lower, upper) from the squared-influence sums at a fixed t."""
    j = _match_eval_time(acc, t)
    n_g = acc.n.get(group, 0)
    if n_g <= 0:
        raise ValidationError(f"no accumulated records for group {group!r}")
    mean_w = acc.sum_w[group] / n_g
    var = acc.sum_w2_psi2_surv[group][j] / (n_g**2 * mean_w**2)
    s = CurveView(params).survival(float(t))
    half = Z_95 * math.sqrt(var)
    return s, max(0.0, s - half), min(1.0, s + half)


def weighted_logrank(acc, params_g1, params_g2, params_all, n1, n2, policy=IntegrationPolicy()):
    """Normalized log-rank numerator with influence-based variance.

    Returns (L, Var(L), z, two-sided p).
    """
    n = n1 + n2
    cap = _common_support(params_g1, params_g2, params_all)
    o1, e1 = _observed_expected(params_g1, params_all, n1, cap, policy)
    l_stat = (o1 - e1) / n
    n_all = acc.n.get("overall", 0)
    if n_all <= 0:
        raise ValidationError("no accumulated records for the overall group")
    mean_w = acc.sum_w["overall"] / n_all
    var_l = acc.sum_w2_psi2_logrank / (n**2 * mean_w**2)
    if var_l <= 0:
        raise DegenerateStatisticError("weighted log-rank variance is nonpositive")
    z = l_stat / math.sqrt(var_l)
    return float(l_stat), float(var_l), float(z), norm_p_two_sided(z)


@dataclass
class StudyResult:
    """Final curves, pointwise CIs, and the between-arm test."""

    method: str
    group_params: dict
    eval_times: np.ndarray
    estimates: dict
    lower: dict
    upper: dict
    logrank: dict
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self):
        groups = sorted(self.group_params)
        return {
            "method": self.method,
            "eval_times": [float(v) for v in self.eval_times],
            "groups": {
                g: {
                    "params": self.group_params[g].to_dict(),
                    "estimate": [float(v) for v in self.estimates[g]],
                    "lower": [float(v) for v in self.lower[g]],
                    "upper": [float(v) for v in self.upper[g]],
                }
                for g in groups
            },
            "logrank": self.logrank,
            "diagnostics": self.diagnostics,
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_curves_csv(self, path):
        """Tidy `group,time,estimate,lower,upper`, stable ordered."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("group,time,estimate,lower,upper\n")
            for g in sorted(self.group_params):
                for j, t in enumerate(self.eval_times):
                    fh.write(
                        f"{g},{float(t):.10g},{self.estimates[g][j]:.10g},"
                        f"{self.lower[g][j]:.10g},{self.upper[g][j]:.10g}\n"
                    )

    def write_logrank_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.logrank, fh, indent=2, sort_keys=True)
            fh.write("\n")
