"""Influence-function estimation and sequential curve updates.

The influence of a new observation on the current curve is evaluated
entirely from spline parameters; updates shift the curve on the dense
refit grid and refit the coefficients, so no historical data is needed.
"""

from dataclasses import dataclass

import numpy as np

from .errors import TailSupportError, ValidationError
from .quadrature import IntegrationPolicy, integrate_batch
from .spline_curve import (
    ATRISK_FLOOR,
    CurveView,
    clamp_probability,
    default_grid,
    fit_spline,
    support_limit,
)

DEFAULT_BATCH_SIZE = 8
MAX_BATCH_SIZE = 1024


@dataclass
class UpdateDiagnostics:
    """Counters surfaced by the orchestrator; updates never self-correct."""

    monotonicity_violations: int = 0
    tail_events_downgraded: int = 0


@dataclass(frozen=True)
class UpdateBatch:
    """New observations applied in one shift."""

    records: tuple
    weights: tuple = ()

    def __post_init__(self):
        if not self.records:
            raise ValidationError("update batch is empty")
        if len(self.records) > MAX_BATCH_SIZE:
            raise ValidationError(
                f"batch size {len(self.records)} exceeds maximum {MAX_BATCH_SIZE}"
            )
        if self.weights and len(self.weights) != len(self.records):
            raise ValidationError("weights length must match records")
        if any(w <= 0 for w in self.weights):
            raise ValidationError("batch weights must be positive")


def _hazard_over_risk(view):
    def f(u):
        _, lam = view.survival_and_hazard(u)
        return lam / view.at_risk(u)

    return f


def influence_matrix(records, params, eval_times, policy=IntegrationPolicy(), atrisk_floor=ATRISK_FLOOR):
    """psi-hat for each record at each eval time; shape (len(records), len(eval_times)).

    All records share one cumulative integral of hazard/at-risk, so the
    cost is a single batched integration regardless of batch size.
    """
    if params.n_cum < 1:
        raise ValidationError("influence requires a curve with n_cum >= 1")
    eval_times = np.asarray(eval_times, dtype=np.float64)
    view = CurveView(params)
    cap = support_limit(params, floor=atrisk_floor)

    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    if np.any(times > params.t_max):
        raise ValidationError(
            f"record time {times.max()} exceeds the curve domain t_max={params.t_max}"
        )

    y_at_x = view.at_risk(times)
    low = (events == 1) & (y_at_x < atrisk_floor)
    if np.any(low):
        bad = times[low][0]
        raise TailSupportError(
            f"event at t={bad} lies beyond the estimable support "
            f"(fitted at-risk below {atrisk_floor})"
        )

    t_clip = np.minimum(eval_times, cap)
    x_clip = np.minimum(times, cap)
    points = np.unique(np.concatenate([t_clip, x_clip]))
    cum = integrate_batch(_hazard_over_risk(view), points, policy)
    idx_t = np.searchsorted(points, t_clip)
    idx_x = np.searchsorted(points, x_clip)

    s_eval = view.survival(eval_times)
    psi = np.empty((len(records), eval_times.size))
    for k in range(len(records)):
        integral = cum[np.minimum(idx_t, idx_x[k])]
        term1 = 0.0
        if events[k] == 1:
            term1 = (eval_times >= times[k]).astype(np.float64) / y_at_x[k]
        psi[k] = -s_eval * (term1 - integral)
    return psi


def influence_at(record, params, eval_times, policy=IntegrationPolicy(), atrisk_floor=ATRISK_FLOOR):
    """psi-hat(t) for one record at the requested times."""
    return influence_matrix([record], params, eval_times, policy, atrisk_floor)[0]


def _note_monotonicity(s_new, diagnostics):
    if diagnostics is not None and np.any(np.diff(s_new) > 0.05):
        diagnostics.monotonicity_violations += 1


def _refit(params, grid, s_new, y_new, n_cum):
    # warm-started: the shifted curve is a small perturbation of the old one
    fs = fit_spline(
        grid, clamp_probability(s_new), params.knots, params.degree, params.link,
        params.t_max, init_coef=params.beta_surv,
    )
    fy = fit_spline(
        grid, clamp_probability(y_new), params.knots, params.degree, params.link,
        params.t_max, init_coef=params.beta_atrisk,
    )
    return params.with_coeffs(beta_surv=fs.coef, beta_atrisk=fy.coef, n_cum=n_cum)


def update_single(params, record, policy=IntegrationPolicy(), diagnostics=None, atrisk_floor=ATRISK_FLOOR):
    """Incorporate one observation: shift by psi/(n+1), West-update at-risk, refit."""
    grid = default_grid(params.t_max)
    psi = influence_at(record, params, grid, policy, atrisk_floor)
    view = CurveView(params)
    n = params.n_cum
    s_new = view.survival(grid) + psi / (n + 1)
    y_old = view.at_risk(grid)
    # closed at-risk indicator, matching the KM risk-set convention
    y_new = y_old + ((record.time >= grid).astype(np.float64) - y_old) / (n + 1)
    _note_monotonicity(s_new, diagnostics)
    return _refit(params, grid, s_new, y_new, n + 1)


def update_batch(params, batch, policy=IntegrationPolicy(), diagnostics=None, atrisk_floor=ATRISK_FLOOR):
    """Incorporate k observations in one shift.

    The combined shift divides the summed influence by the average of
    the successive cumulative counts, n + (k+1)/2; at k=1 this is
    exactly update_single.
    """
    if not isinstance(batch, UpdateBatch):
        batch = UpdateBatch(records=tuple(batch))
    grid = default_grid(params.t_max)
    psi = influence_matrix(batch.records, params, grid, policy, atrisk_floor)
    view = CurveView(params)
    n = params.n_cum
    k = len(batch.records)
    denom = n + (k + 1) / 2.0
    s_new = view.survival(grid) + psi.sum(axis=0) / denom
    y_old = view.at_risk(grid)
    times = np.array([r.time for r in batch.records])
    still_at_risk = (times[:, None] >= grid[None, :]).sum(axis=0)
    y_new = y_old + (still_at_risk - k * y_old) / (n + k)
    _note_monotonicity(s_new, diagnostics)
    return _refit(params, grid, s_new, y_new, n + k)


def update_weighted(params, record, weight, cum_weight, policy=IntegrationPolicy(), diagnostics=None, atrisk_floor=ATRISK_FLOOR):
    """Weighted single-observation update; returns (params, new cum_weight)."""
    if weight <= 0:
        raise ValidationError(f"weight must be positive, got {weight}")
    if cum_weight <= 0:
        raise ValidationError(f"cumulative weight must be positive, got {cum_weight}")
    grid = default_grid(params.t_max)
    psi = influence_at(record, params, grid, policy, atrisk_floor)
    view = CurveView(params)
    new_cum = cum_weight + weight
    s_new = view.survival(grid) + weight * psi / new_cum
    y_old = view.at_risk(grid)
    y_new = y_old + weight * ((record.time >= grid).astype(np.float64) - y_old) / new_cum
    _note_monotonicity(s_new, diagnostics)
    return _refit(params, grid, s_new, y_new, params.n_cum + 1), new_cum


def update_weighted_batch(params, records, weights, cum_weight, policy=IntegrationPolicy(), diagnostics=None, atrisk_floor=ATRISK_FLOOR):
    """Weighted k-observation shift; weighted analogue of update_batch.

    The denominator is the mean of the successive cumulative weight
    totals, which reduces to update_weighted at k=1 and to update_batch
    under unit weights.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights <= 0):
        raise ValidationError("weights must be positive")
    if cum_weight <= 0:
        raise ValidationError(f"cumulative weight must be positive, got {cum_weight}")
    grid = default_grid(params.t_max)
    psi = influence_matrix(records, params, grid, policy, atrisk_floor)
    view = CurveView(params)
    k = len(records)
    w_total = float(weights.sum())
    denom = float(np.mean(cum_weight + np.cumsum(weights)))
    s_new = view.survival(grid) + (weights @ psi) / denom
    y_old = view.at_risk(grid)
    times = np.array([r.time for r in records])
    at_risk_w = (weights[:, None] * (times[:, None] >= grid[None, :])).sum(axis=0)
    y_new = (cum_weight * y_old + at_risk_w) / (cum_weight + w_total)
    _note_monotonicity(s_new, diagnostics)
    return _refit(params, grid, s_new, y_new, params.n_cum + k), cum_weight + w_total
