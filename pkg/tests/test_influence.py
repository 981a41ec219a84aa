import numpy as np
import pytest

from conftest import draw_exponential_records, initial_fit

from distkm.errors import TailSupportError, ValidationError
from distkm.influence import (
    UpdateBatch,
    UpdateDiagnostics,
    _note_monotonicity,
    influence_at,
    influence_matrix,
    update_batch,
    update_single,
    update_weighted,
    update_weighted_batch,
)
from distkm.quadrature import IntegrationPolicy, integrate
from distkm.spline_curve import (
    CurveView,
    SplineParams,
    clamp_probability,
    default_grid,
    fit_params,
    link_apply,
    support_limit,
)
from distkm.federation import _adaptive_floor, _screen_tail_events
from distkm.surv_core import SurvivalRecord, km_fit, km_fit_weighted

T_MAX = 30.0


def constant_params(s_level=0.7, y_level=0.5, n_cum=10):
    knots = np.array([10.0, 20.0])
    dim = knots.size + 4
    return SplineParams(
        knots=knots,
        degree=3,
        link="logit",
        beta_surv=np.full(dim, float(link_apply("logit", s_level))),
        beta_atrisk=np.full(dim, float(link_apply("logit", y_level))),
        n_cum=n_cum,
        t_max=T_MAX,
    )


class TestInfluenceAt:
    def test_flat_curve_censored_record_has_zero_influence(self):
        params = constant_params()
        psi = influence_at(SurvivalRecord(5.0, 0), params, np.linspace(0, T_MAX, 40))
        np.testing.assert_allclose(psi, 0.0, atol=1e-9)

    def test_event_beyond_eval_time_keeps_only_integral_term(self, exp_params_400):
        params = exp_params_400
        view = CurveView(params)
        x = 0.9 * params.t_max
        eval_times = np.array([2.0, 5.0, 9.0])
        psi = influence_at(SurvivalRecord(x, 1), params, eval_times)
        policy = IntegrationPolicy()

        def integrand(u):
            s, lam = view.survival_and_hazard(u)
            return lam / view.at_risk(u)

        expected = np.array(
            [view.survival(t) * integrate(integrand, 0.0, t, policy) for t in eval_times]
        )
        np.testing.assert_allclose(psi, expected, atol=1e-6)

    def test_requires_fitted_curve(self):
        params = constant_params(n_cum=0)
        with pytest.raises(ValidationError):
            influence_at(SurvivalRecord(1.0, 1), params, np.array([1.0]))

    def test_record_beyond_domain_rejected(self, exp_params_400):
        with pytest.raises(ValidationError):
            influence_at(SurvivalRecord(T_MAX * 10, 0), exp_params_400, np.array([1.0]))

    def test_finite_difference_oracle(self, exp_records_400, exp_params_400):
        params = exp_params_400
        km_base = km_fit(exp_records_400)
        n = len(exp_records_400)
        qt = np.array([-15.0 * np.log(1 - q) for q in (0.25, 0.35, 0.5, 0.7)])
        rng = np.random.default_rng(99)
        checked = 0
        for _ in range(12):
            t_new = float(rng.exponential(15.0))
            c_new = float(rng.exponential(35.0))
            record = SurvivalRecord(min(t_new, c_new, 0.9 * params.t_max), int(t_new <= min(c_new, 0.9 * params.t_max)))
            psi = influence_at(record, params, qt)
            km_plus = km_fit(list(exp_records_400) + [record])
            fd = (n + 1) * (km_plus.evaluate(qt) - km_base.evaluate(qt))
            assert np.all(np.abs(psi - fd) <= 0.15 * np.abs(psi) + 0.01)
            checked += 1
        assert checked == 12

    def test_event_beyond_support_raises(self):
        grid = default_grid(T_MAX)
        s = clamp_probability(np.exp(-grid / 15.0))
        y = clamp_probability(np.exp(-grid / 2.0))  # at-risk below 1e-4 past ~18.4
        knots = np.array([1.0, 3.0, 6.0, 10.0, 15.0, 22.0])
        params = fit_params(grid, s, y, knots, 3, "logit", T_MAX, n_cum=200)
        with pytest.raises(TailSupportError):
            influence_at(SurvivalRecord(26.0, 1), params, np.array([5.0]))
        # censored at the same spot integrates over the truncated support
        psi = influence_at(SurvivalRecord(26.0, 0), params, np.array([5.0]))
        assert np.all(np.isfinite(psi))


class TestUpdateSingle:
    def test_zero_influence_leaves_survival_unchanged(self):
        params = constant_params(n_cum=50)
        grid = default_grid(T_MAX)
        before = CurveView(params).survival(grid)
        out = update_single(params, SurvivalRecord(5.0, 0))
        after = CurveView(out).survival(grid)
        assert np.max(np.abs(after - before)) < 1e-6
        assert out.n_cum == 51

    def test_bookkeeping(self, exp_params_400):
        out = update_single(exp_params_400, SurvivalRecord(3.0, 1))
        assert out.n_cum == exp_params_400.n_cum + 1
        y0 = CurveView(out).at_risk(0.0)
        assert 0.0 <= y0 <= 1.0

    def test_two_sites_sequential_vs_pooled(self):
        records = draw_exponential_records(500, seed=31)
        t_max = float(np.quantile([r.time for r in records], 0.97))
        params = initial_fit(records[:250], t_max=t_max)
        for r in records[250:]:
            capped = SurvivalRecord(min(r.time, t_max), r.event if r.time <= t_max else 0)
            floor = _adaptive_floor(params.n_cum)
            capped = _screen_tail_events([capped], params, None, floor)[0]
            params = update_single(params, capped, atrisk_floor=floor)
        km = km_fit(
            [SurvivalRecord(min(r.time, t_max), r.event if r.time <= t_max else 0) for r in records]
        )
        grid = default_grid(t_max)
        sup = np.max(np.abs(CurveView(params).survival(grid) - km.evaluate(grid)))
        assert sup < 0.02


class TestUpdateBatch:
    def test_k1_identical_to_single(self, exp_params_400):
        record = SurvivalRecord(4.0, 1)
        a = update_single(exp_params_400, record)
        b = update_batch(exp_params_400, UpdateBatch(records=(record,)))
        grid = default_grid(exp_params_400.t_max)
        np.testing.assert_allclose(
            CurveView(a).survival(grid), CurveView(b).survival(grid), atol=1e-12
        )
        np.testing.assert_allclose(
            CurveView(a).at_risk(grid), CurveView(b).at_risk(grid), atol=1e-12
        )

    def test_k5_close_to_sequential(self, exp_records_400, exp_params_400):
        new = draw_exponential_records(5, seed=77)
        new = [SurvivalRecord(min(r.time, 0.9 * exp_params_400.t_max), r.event) for r in new]
        batched = update_batch(exp_params_400, UpdateBatch(records=tuple(new)))
        seq = exp_params_400
        for r in new:
            seq = update_single(seq, r)
        grid = default_grid(exp_params_400.t_max)
        diff = np.abs(CurveView(batched).survival(grid) - CurveView(seq).survival(grid))
        assert np.max(diff) < 1e-3
        assert batched.n_cum == seq.n_cum == exp_params_400.n_cum + 5

    def test_zero_effect_batch(self):
        params = constant_params(n_cum=50)
        batch = UpdateBatch(records=(SurvivalRecord(5.0, 0), SurvivalRecord(7.0, 0)))
        out = update_batch(params, batch)
        grid = default_grid(T_MAX)
        assert np.max(np.abs(CurveView(out).survival(grid) - CurveView(params).survival(grid))) < 1e-6
        assert out.n_cum == 52

    def test_empty_batch_rejected(self):
        with pytest.raises(ValidationError):
            UpdateBatch(records=())

    def test_oversized_batch_rejected(self):
        records = tuple(SurvivalRecord(1.0, 0) for _ in range(2000))
        with pytest.raises(ValidationError):
            UpdateBatch(records=records)


class TestUpdateWeighted:
    def test_unit_weights_match_single(self, exp_params_400):
        record = SurvivalRecord(4.0, 1)
        n = exp_params_400.n_cum
        a = update_single(exp_params_400, record)
        b, cum = update_weighted(exp_params_400, record, 1.0, float(n))
        assert cum == n + 1
        grid = default_grid(exp_params_400.t_max)
        np.testing.assert_allclose(
            CurveView(a).survival(grid), CurveView(b).survival(grid), atol=1e-12
        )

    def test_common_scale_cancels(self, exp_params_400):
        record = SurvivalRecord(4.0, 1)
        n = exp_params_400.n_cum
        a = update_single(exp_params_400, record)
        b, _ = update_weighted(exp_params_400, record, 2.0, 2.0 * n)
        grid = default_grid(exp_params_400.t_max)
        np.testing.assert_allclose(
            CurveView(a).survival(grid), CurveView(b).survival(grid), atol=1e-12
        )

    def test_nonpositive_weight_rejected(self, exp_params_400):
        with pytest.raises(ValidationError):
            update_weighted(exp_params_400, SurvivalRecord(1.0, 1), 0.0, 10.0)

    def test_weighted_two_site_vs_pooled_weighted_km(self):
        rng = np.random.default_rng(5150)
        base = draw_exponential_records(500, seed=5150)
        weights = rng.uniform(0.5, 3.0, 500)
        records = [
            SurvivalRecord(r.time, r.event, weight=float(w)) for r, w in zip(base, weights)
        ]
        t_max = float(np.quantile([r.time for r in records], 0.97))
        capped = [
            SurvivalRecord(min(r.time, t_max), r.event if r.time <= t_max else 0, weight=r.weight)
            for r in records
        ]
        site1, site2 = capped[:250], capped[250:]

        km_w = km_fit_weighted(site1)
        grid = default_grid(t_max)
        times = np.array([r.time for r in site1])
        w1 = np.array([r.weight for r in site1])
        y = (w1[:, None] * (times[:, None] >= grid[None, :])).sum(axis=0) / w1.sum()
        from distkm.spline_curve import knots_from_quantiles

        knots = knots_from_quantiles(times, 9, t_max)
        params = fit_params(grid, km_w.evaluate(grid), y, knots, 3, "logit", t_max, n_cum=250)
        cum = float(w1.sum())
        for r in site2:
            floor = _adaptive_floor(params.n_cum)
            r = _screen_tail_events([r], params, None, floor)[0]
            params, cum = update_weighted(params, r, r.weight, cum, atrisk_floor=floor)
        km_all = km_fit_weighted(capped)
        sup = np.max(np.abs(CurveView(params).survival(grid) - km_all.evaluate(grid)))
        assert sup < 0.02

    def test_weighted_batch_reductions(self, exp_params_400):
        records = [SurvivalRecord(4.0, 1), SurvivalRecord(6.0, 0), SurvivalRecord(2.0, 1)]
        n = exp_params_400.n_cum
        grid = default_grid(exp_params_400.t_max)
        # unit weights reduce to the unweighted batch formula
        a = update_batch(exp_params_400, UpdateBatch(records=tuple(records)))
        b, cum = update_weighted_batch(exp_params_400, records, np.ones(3), float(n))
        np.testing.assert_allclose(
            CurveView(a).survival(grid), CurveView(b).survival(grid), atol=1e-12
        )
        assert cum == n + 3
        # k=1 reduces to the single weighted update
        c, _ = update_weighted(exp_params_400, records[0], 1.7, float(n))
        d, _ = update_weighted_batch(exp_params_400, records[:1], np.array([1.7]), float(n))
        np.testing.assert_allclose(
            CurveView(c).survival(grid), CurveView(d).survival(grid), atol=1e-12
        )


class TestDiagnostics:
    def test_counter_increments_on_violation(self):
        diag = UpdateDiagnostics()
        _note_monotonicity(np.array([0.5, 0.58, 0.4]), diag)
        assert diag.monotonicity_violations == 1
        _note_monotonicity(np.array([0.5, 0.52, 0.4]), diag)
        assert diag.monotonicity_violations == 1

    def test_counter_wired_through_updates(self):
        params = constant_params(n_cum=50)
        diag = UpdateDiagnostics()
        update_single(params, SurvivalRecord(5.0, 0), diagnostics=diag)
        assert diag.monotonicity_violations == 0
        assert diag.tail_events_downgraded == 0


class TestSiteOrderRobustness:
    def test_two_site_orders_agree(self):
        records = draw_exponential_records(800, seed=808)
        t_max = float(np.quantile([r.time for r in records], 0.97))
        capped = [
            SurvivalRecord(min(r.time, t_max), r.event if r.time <= t_max else 0) for r in records
        ]
        rng = np.random.default_rng(2)
        grid = default_grid(t_max)
        curves = []
        for _ in range(2):
            order = rng.permutation(len(capped))
            recs = [capped[i] for i in order]
            params = initial_fit(recs[:200], t_max=t_max)
            pos = 200
            while pos < len(recs):
                floor = _adaptive_floor(params.n_cum)
                chunk = _screen_tail_events(recs[pos : pos + 8], params, None, floor)
                params = update_batch(
                    params, UpdateBatch(records=tuple(chunk)), atrisk_floor=floor
                )
                pos += 8
            curves.append(CurveView(params).survival(grid))
        assert np.max(np.abs(curves[0] - curves[1])) < 0.01
