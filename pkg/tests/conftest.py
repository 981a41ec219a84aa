import numpy as np
import pytest

from distkm.spline_curve import default_grid, fit_params, knots_from_quantiles
from distkm.surv_core import SurvivalRecord, km_fit


def draw_exponential_records(n, seed, scale=15.0, censor_rate=1.0 / 35.0, arm_prob=None):
    """Exponential survival with exponential censoring; optional arms."""
    rng = np.random.default_rng(seed)
    t_true = rng.exponential(scale, n)
    c = rng.exponential(1.0 / censor_rate, n)
    x = np.minimum(t_true, c)
    delta = (t_true <= c).astype(int)
    arms = rng.binomial(1, arm_prob, n) if arm_prob is not None else [None] * n
    return [
        SurvivalRecord(time=float(x[i]), event=int(delta[i]), arm=arms[i])
        for i in range(n)
    ]


def initial_fit(records, n_knots=9, degree=3, link="logit", t_max=None):
    """Site-1 style spline fit of the exact KM and empirical at-risk curve."""
    times = np.array([r.time for r in records])
    if t_max is None:
        t_max = 1.05 * float(times.max())
    capped = [
        SurvivalRecord(min(r.time, t_max), r.event if r.time <= t_max else 0, r.arm)
        for r in records
    ]
    times = np.minimum(times, t_max)
    km = km_fit(capped)
    grid = default_grid(t_max)
    s = km.evaluate(grid)
    y = (times[:, None] >= grid[None, :]).mean(axis=0)
    knots = knots_from_quantiles(times, n_knots, t_max)
    return fit_params(grid, s, y, knots, degree, link, t_max, n_cum=len(records))


@pytest.fixture(scope="session")
def exp_records_400():
    return draw_exponential_records(400, seed=404)


@pytest.fixture(scope="session")
def exp_params_400(exp_records_400):
    return initial_fit(exp_records_400)
