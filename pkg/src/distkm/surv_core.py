"""Exact pooled-data survival estimation.

Product-limit curves, Greenwood variances, and the two-sample log-rank
test computed directly from individual records. These are the ground
truth that every distributed computation is checked against, and the
initializer used by the leading site.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStatisticError, ValidationError


def chi2_sf_1df(x):
    """Upper tail of chi-square with 1 df.

    Q(1/2, x/2) reduces to erfc(sqrt(x/2)); accurate to ~1e-15.
    """
    if x < 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


def norm_p_two_sided(z):
    """Two-sided standard normal p-value for an observed z statistic."""
    return math.erfc(abs(z) / math.sqrt(2.0))


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: follow-up time, event indicator, optional arm/covariates."""

    time: float
    event: int
    arm: int | None = None
    covariates: tuple = ()
    weight: float = 1.0

    def validate(self):
        if not (math.isfinite(self.time) and self.time >= 0):
            raise ValidationError(f"time must be a finite nonnegative real, got {self.time}")
        if self.event not in (0, 1):
            raise ValidationError(f"event must be 0 or 1, got {self.event}")
        if self.arm is not None and self.arm not in (0, 1):
            raise ValidationError(f"arm must be 0, 1 or absent, got {self.arm}")
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise ValidationError(f"weight must be positive, got {self.weight}")


def validate_records(records):
    """Check per-record invariants and the constant covariate length."""
    if not records:
        raise ValidationError("record list is empty")
    p = len(records[0].covariates)
    for r in records:
        r.validate()
        if len(r.covariates) != p:
            raise ValidationError(
                f"covariate length must be identical across records ({len(r.covariates)} != {p})"
            )


def as_arrays(records):
    """Columnar view: (time, event, arm, covariates, weight) numpy arrays.

    Missing arms are encoded as -1.
    """
    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=np.int64)
    a = np.array([-1 if r.arm is None else r.arm for r in records], dtype=np.int64)
    z = np.array([r.covariates for r in records], dtype=np.float64)
    if z.ndim == 1:  # zero covariates
        z = z.reshape(len(records), 0)
    w = np.array([r.weight for r in records], dtype=np.float64)
    return t, e, a, z, w


@dataclass(frozen=True)
class StepCurve:
    """Right-continuous product-limit step curve.

    ``at_risk`` and ``events`` hold plain counts for the unweighted fit
    and weight sums for the weighted one.
    """

    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    n_total: int

    def evaluate(self, t):
        """Survival at time(s) t; 1 before the first event time."""
        t = np.asarray(t, dtype=np.float64)
        if self.event_times.size == 0:
            out = np.ones_like(t)
            return out if out.ndim else 1.0
        idx = np.searchsorted(self.event_times, t, side="right")
        out = np.where(idx == 0, 1.0, self.survival[np.maximum(idx - 1, 0)])
        return out if out.ndim else float(out)


def _km_impl(times, events, weights):
    order = np.argsort(times, kind="stable")
    t = times[order]
    e = events[order]
    w = weights[order]
    total = w.sum()
    cumw = np.concatenate([[0.0], np.cumsum(w)])

    et = t[e == 1]
    ew = w[e == 1]
    uniq = np.unique(et)
    if uniq.size == 0:
        return (
            np.empty(0),
            np.empty(0),
            np.empty(0),
            np.empty(0),
        )
    # events at exactly t_j
    lo = np.searchsorted(et, uniq, side="left")
    hi = np.searchsorted(et, uniq, side="right")
    cew = np.concatenate([[0.0], np.cumsum(ew)])
    d = cew[hi] - cew[lo]
    # at risk: everything with X >= t_j (ties censored at t_j stay at risk)
    n = total - cumw[np.searchsorted(t, uniq, side="left")]
    surv = np.cumprod(1.0 - d / n)
    return uniq, surv, n, d


def km_fit(records):
    """Kaplan-Meier product-limit estimate from unweighted records."""
    validate_records(records)
    t, e, _, _, _ = as_arrays(records)
    uniq, surv, n, d = _km_impl(t, e, np.ones_like(t))
    return StepCurve(uniq, surv, n, d, n_total=len(records))


def km_fit_weighted(records):
    """Weighted Kaplan-Meier: event and at-risk counts replaced by weight sums."""
    validate_records(records)
    t, e, _, _, w = as_arrays(records)
    uniq, surv, n, d = _km_impl(t, e, w)
    return StepCurve(uniq, surv, n, d, n_total=len(records))


def greenwood_discrete(curve, t):
    """Variance of log(-log S(t)) from the exponential Greenwood formula."""
    s = curve.evaluate(t)
    if s >= 1.0 or s <= 0.0:
        raise DegenerateStatisticError(
            f"variance of log(-log S) undefined at t={t} where S={s}"
        )
    mask = curve.event_times <= t
    n = curve.at_risk[mask]
    d = curve.events[mask]
    terms = d / (n * (n - d))
    return float(terms.sum() / math.log(s) ** 2)


def logrank_discrete(records):
    """Two-sample log-rank: X^2 = sum_k (O_k - E_k)^2 / E_k on 1 df."""
    validate_records(records)
    t, e, a, _, _ = as_arrays(records)
    if np.any(a < 0):
        raise ValidationError("log-rank test requires an arm for every record")
    if not (np.any(a == 0) and np.any(a == 1)):
        raise ValidationError("log-rank test requires records in both arms")

    uniq = np.unique(t[e == 1])
    obs = np.zeros(2)
    exp = np.zeros(2)
    for tj in uniq:
        at_risk = t >= tj
        d_total = float(np.sum((t == tj) & (e == 1)))
        n_total = float(np.sum(at_risk))
        for k in (0, 1):
            obs[k] += float(np.sum((t == tj) & (e == 1) & (a == k)))
            exp[k] += float(np.sum(at_risk & (a == k))) * d_total / n_total
    if np.any(exp <= 0):
        raise DegenerateStatisticError("expected event count is zero in one arm")
    stat = float(np.sum((obs - exp) ** 2 / exp))
    return stat, chi2_sf_1df(stat)


_BASE_COLUMNS = ("time", "event", "arm", "weight")


def read_records_csv(path):
    """Load records from `time,event[,arm][,z1..zp][,weight]` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: missing header row")
        names = [c.strip() for c in reader.fieldnames]
        if "time" not in names or "event" not in names:
            raise ValidationError(f"{path}: header must contain 'time' and 'event'")
        zcols = [c for c in names if c not in _BASE_COLUMNS]
        for c in zcols:
            if not (c.startswith("z") and c[1:].isdigit()):
                raise ValidationError(f"{path}: unknown column {c!r}")
        zcols.sort(key=lambda c: int(c[1:]))
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = SurvivalRecord(
                    time=float(row["time"]),
                    event=int(float(row["event"])),
                    arm=int(float(row["arm"])) if "arm" in names and row["arm"] != "" else None,
                    covariates=tuple(float(row[c]) for c in zcols),
                    weight=float(row["weight"]) if "weight" in names and row["weight"] != "" else 1.0,
                )
            except (TypeError, KeyError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed row ({exc})") from exc
            records.append(rec)
    validate_records(records)
    return records


def write_records_csv(path, records):
    """Inverse of read_records_csv; used by the simulation CLI."""
    validate_records(records)
    p = len(records[0].covariates)
    has_arm = any(r.arm is not None for r in records)
    header = ["time", "event"]
    if has_arm:
        header.append("arm")
    header += [f"z{i + 1}" for i in range(p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            row = [repr(float(r.time)), r.event]
            if has_arm:
                row.append("" if r.arm is None else r.arm)
            row += [repr(float(z)) for z in r.covariates]
            writer.writerow(row)
