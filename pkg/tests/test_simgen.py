import numpy as np
import pytest

from distkm.errors import ValidationError
from distkm.simgen import (
    _draw_population,
    _site_sizes,
    default_config,
    evaluate,
    generate,
    make_scenario,
    true_survival,
)


class TestScenarioTable:
    def test_scenario_a_parameters(self):
        sc = make_scenario("A", 1.0)
        assert sc.n_total == 800
        assert (sc.site_min, sc.site_max) == (5, 350)
        assert sc.n_sites == 10
        assert sc.target_censoring == 0.30

    def test_scenario_e_parameters(self):
        sc = make_scenario("E", 1.0)
        assert sc.n_total == 2000
        assert (sc.site_min, sc.site_max) == (5, 1000)
        assert sc.target_censoring == 0.50

    def test_unknown_scenario(self):
        with pytest.raises(ValidationError):
            make_scenario("F", 1.0)

    def test_quantile_times_hit_survival_levels(self):
        for sid in ("A", "C"):
            sc = make_scenario(sid, 1.0)
            s = true_survival(sid, 1.0, np.array(sc.quantile_times))
            np.testing.assert_allclose(s, [0.75, 0.65, 0.50, 0.30], atol=1e-6)

    def test_scenario_a_quantiles_closed_form(self):
        sc = make_scenario("A", 1.0)
        expected = [-15.0 * np.log(1 - q) for q in (0.25, 0.35, 0.5, 0.7)]
        np.testing.assert_allclose(sc.quantile_times, expected, rtol=1e-9)


class TestTruth:
    @pytest.mark.parametrize("sid,hr", [("A", 1.0), ("B", 1.0), ("C", 1.3), ("E", 1.0)])
    def test_truth_matches_monte_carlo(self, sid, hr):
        rng = np.random.default_rng(1234)
        _, _, t = _draw_population(sid, hr, 200_000, rng)
        sc_times = np.array(make_scenario(sid, hr).quantile_times)
        mc = np.array([(t > tt).mean() for tt in sc_times])
        exact = true_survival(sid, hr, sc_times)
        np.testing.assert_allclose(exact, mc, atol=0.005)

    def test_null_hr_makes_arms_identical(self):
        rng = np.random.default_rng(9)
        z, a, t = _draw_population("A", 1.0, 10_000, rng)
        from scipy.stats import ks_2samp

        stat = ks_2samp(t[a == 1], t[a == 0]).statistic
        assert stat < 0.03


class TestGenerate:
    def test_censoring_calibration(self):
        for sid in ("A", "E"):
            sc = make_scenario(sid, 1.0)
            events = []
            for r in range(13):
                for site in generate(sc, [123, r]):
                    events.extend(rec.event for rec in site.records)
            frac_censored = 1.0 - np.mean(events)
            assert abs(frac_censored - sc.target_censoring) < 0.03

    def test_sites_partition_exactly(self):
        sc = make_scenario("A", 1.0)
        for r in range(5):
            sites = generate(sc, [7, r])
            sizes = [len(s.records) for s in sites]
            assert sum(sizes) == sc.n_total
            assert all(sc.site_min <= n <= sc.site_max for n in sizes)
            assert len(sites) == sc.n_sites

    def test_leading_site_qualifies(self):
        sc = make_scenario("A", 1.0)
        for r in range(5):
            lead = generate(sc, [7, r])[0]
            assert len(lead.records) >= 50
            assert sum(rec.event for rec in lead.records) >= 10

    def test_seeded_determinism(self):
        sc = make_scenario("A", 1.0)
        a = generate(sc, [42, 0])
        b = generate(sc, [42, 0])
        assert [s.records for s in a] == [s.records for s in b]
        c = generate(sc, [43, 0])
        assert [s.records for s in a] != [s.records for s in c]

    def test_times_capped_at_horizon(self):
        sc = make_scenario("A", 1.0)
        for site in generate(sc, [3, 0]):
            for rec in site.records:
                assert rec.time <= sc.t_max

    def test_infeasible_bounds_rejected(self):
        sc = make_scenario("A", 1.0)
        bad = sc.__class__(**{**sc.__dict__, "n_total": 10_000})
        with pytest.raises(ValidationError):
            _site_sizes(bad, np.random.default_rng(0))


class TestEvaluate:
    def test_three_repeats_and_determinism(self):
        sc = make_scenario("A", 1.0)
        m1 = evaluate(sc, 3, seed=5)
        m2 = evaluate(sc, 3, seed=5)
        assert m1.to_json() == m2.to_json()
        assert m1.repeats == 3
        for v in m1.coverage_dist + m1.coverage_pooled:
            assert 0.0 <= v <= 1.0
        assert 0.0 <= m1.reject_rate_dist <= 1.0

    def test_parallel_matches_serial(self):
        sc = make_scenario("A", 1.0)
        serial = evaluate(sc, 4, seed=6, workers=1)
        parallel = evaluate(sc, 4, seed=6, workers=2)
        assert serial.to_json() == parallel.to_json()

    def test_csv_export(self, tmp_path):
        sc = make_scenario("A", 1.0)
        m = evaluate(sc, 2, seed=8)
        path = tmp_path / "reps.csv"
        m.write_per_repeat_csv(path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 3

    def test_invalid_repeats(self):
        sc = make_scenario("A", 1.0)
        with pytest.raises(ValidationError):
            evaluate(sc, 0, seed=1)


class TestDefaultConfig:
    def test_restriction_follows_scenario(self):
        assert default_config(make_scenario("A", 1.0)).restriction == 0.0
        sc_e = make_scenario("E", 1.0)
        assert default_config(sc_e).restriction == pytest.approx(0.05 * sc_e.t_max)
