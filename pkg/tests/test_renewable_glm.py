import itertools

import numpy as np
import pytest

from distkm.errors import ClampWarning, ConvergenceError, DesignError, ValidationError
from distkm.renewable_glm import (
    PropensityState,
    propensity_init,
    propensity_update,
    weights_for,
)
from distkm.spline_curve import _expit
from distkm.surv_core import SurvivalRecord


def make_records(z, arm):
    return [
        SurvivalRecord(time=1.0, event=0, arm=int(a), covariates=tuple(row))
        for row, a in zip(z, arm)
    ]


def simulate_logistic(n, coef, seed):
    rng = np.random.default_rng(seed)
    p = len(coef) - 1
    z = rng.standard_normal((n, p))
    eta = coef[0] + z @ np.asarray(coef[1:])
    arm = rng.binomial(1, _expit(eta))
    return make_records(z, arm)


class TestPropensityInit:
    def test_intercept_only_closed_form(self):
        records = make_records(np.empty((64, 0)), [1] * 16 + [0] * 48)
        state = propensity_init(records)
        assert state.coef[0] == pytest.approx(np.log(0.25 / 0.75), abs=1e-8)
        assert state.n_cum == 64

    def test_slope_recovery_within_three_se(self):
        records = simulate_logistic(500, [0.0, 0.5], seed=42)
        state = propensity_init(records)
        se = np.sqrt(np.linalg.inv(state.cum_info)[1, 1])
        assert abs(state.coef[1] - 0.5) < 3 * se

    def test_matches_sklearn(self):
        from sklearn.linear_model import LogisticRegression

        records = simulate_logistic(400, [0.3, -0.7, 0.4], seed=3)
        state = propensity_init(records)
        z = np.array([r.covariates for r in records])
        y = np.array([r.arm for r in records])
        sk = LogisticRegression(penalty=None, tol=1e-10, max_iter=500).fit(z, y)
        np.testing.assert_allclose(state.coef[0], sk.intercept_[0], atol=1e-6)
        np.testing.assert_allclose(state.coef[1:], sk.coef_[0], atol=1e-6)

    def test_perfect_separation_raises(self):
        z = np.linspace(-2, 2, 30).reshape(-1, 1)
        arm = (z[:, 0] > 0).astype(int)
        with pytest.raises(ConvergenceError):
            propensity_init(make_records(z, arm))

    def test_single_arm_rejected(self):
        records = make_records(np.random.default_rng(0).standard_normal((20, 1)), [1] * 20)
        with pytest.raises(ValidationError):
            propensity_init(records)

    def test_rank_deficient_design(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(40)
        z = np.column_stack([x, 2 * x])  # collinear
        arm = rng.binomial(1, 0.5, 40)
        with pytest.raises(DesignError):
            propensity_init(make_records(z, arm))

    def test_missing_arm_rejected(self):
        records = [SurvivalRecord(1.0, 0, arm=None, covariates=(0.1,))]
        with pytest.raises(ValidationError):
            propensity_init(records)


class TestPropensityUpdate:
    def test_empty_site_is_identity(self):
        state = propensity_init(simulate_logistic(200, [0.0, 0.5], seed=1))
        assert propensity_update(state, []) is state

    def test_two_site_renewable_matches_pooled(self):
        records = simulate_logistic(1000, [0.2, 0.5, -0.3], seed=10)
        pooled = propensity_init(records)
        state = propensity_init(records[:400])
        state = propensity_update(state, records[400:])
        assert np.max(np.abs(state.coef - pooled.coef)) < 5e-3
        assert state.n_cum == 1000

    def test_three_sites_any_order(self):
        records = simulate_logistic(900, [0.0, 0.4, 0.2], seed=11)
        chunks = [records[:300], records[300:600], records[600:]]
        coefs = []
        for order in itertools.permutations(range(3)):
            state = propensity_init(chunks[order[0]])
            for i in order[1:]:
                state = propensity_update(state, chunks[i])
            coefs.append(state.coef)
        coefs = np.array(coefs)
        assert np.max(coefs.max(axis=0) - coefs.min(axis=0)) < 5e-3

    def test_dimension_mismatch(self):
        state = propensity_init(simulate_logistic(200, [0.0, 0.5], seed=1))
        with pytest.raises(ValidationError):
            propensity_update(state, simulate_logistic(50, [0.0, 0.5, 0.1], seed=2))

    def test_cum_info_stays_symmetric_psd(self):
        records = simulate_logistic(600, [0.1, 0.3, -0.2], seed=12)
        state = propensity_init(records[:200])
        for lo in (200, 400):
            state = propensity_update(state, records[lo : lo + 200])
            np.testing.assert_allclose(state.cum_info, state.cum_info.T, atol=1e-10)
            assert np.min(np.linalg.eigvalsh(state.cum_info)) >= -1e-10


class TestWeightsFor:
    def test_half_propensity_gives_weight_two(self):
        records = make_records(np.empty((10, 0)), [1] * 5 + [0] * 5)
        state = propensity_init(records)
        w = weights_for(records, state)
        np.testing.assert_allclose(w, 2.0, atol=1e-9)

    def test_treated_quarter_propensity(self):
        state = PropensityState(
            coef=np.array([np.log(0.25 / 0.75)]), cum_info=np.eye(1), n_cum=10
        )
        rec = SurvivalRecord(1.0, 1, arm=1, covariates=())
        w = weights_for([rec], state)
        assert w[0] == pytest.approx(4.0, abs=1e-10)

    def test_clamp_warns_and_caps_at_100(self):
        state = PropensityState(coef=np.array([-7.0]), cum_info=np.eye(1), n_cum=10)
        rec = SurvivalRecord(1.0, 1, arm=1, covariates=())
        with pytest.warns(ClampWarning):
            w = weights_for([rec], state)
        assert w[0] == pytest.approx(100.0, abs=1e-9)

    def test_missing_arm_rejected(self):
        state = PropensityState(coef=np.array([0.0]), cum_info=np.eye(1), n_cum=10)
        with pytest.raises(ValidationError):
            weights_for([SurvivalRecord(1.0, 1, arm=None, covariates=())], state)

    def test_ipw_balances_covariates(self):
        records = simulate_logistic(2000, [0.0, 0.5, 0.5], seed=2020)
        state = propensity_init(records)
        w = weights_for(records, state)
        z = np.array([r.covariates for r in records])
        a = np.array([r.arm for r in records])
        for j in range(z.shape[1]):
            m1 = np.average(z[a == 1, j], weights=w[a == 1])
            m0 = np.average(z[a == 0, j], weights=w[a == 0])
            pooled_sd = np.sqrt(0.5 * (z[a == 1, j].var() + z[a == 0, j].var()))
            assert abs(m1 - m0) / pooled_sd < 0.1


class TestSerialization:
    def test_roundtrip(self):
        state = propensity_init(simulate_logistic(150, [0.1, -0.4], seed=6))
        back = PropensityState.from_dict(state.to_dict())
        np.testing.assert_array_equal(back.coef, state.coef)
        np.testing.assert_array_equal(back.cum_info, state.cum_info)
        assert back.n_cum == state.n_cum
