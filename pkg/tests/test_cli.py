import json
import os

import numpy as np
import pytest

from conftest import draw_exponential_records

from distkm.cli import main
from distkm.federation import FederationConfig, Site, SiteDataset
from distkm.surv_core import SurvivalRecord, write_records_csv


@pytest.fixture()
def study_dir(tmp_path):
    rng = np.random.default_rng(17)
    records = draw_exponential_records(400, seed=17, arm_prob=0.5)
    records = [
        SurvivalRecord(r.time, r.event, r.arm, covariates=(float(rng.standard_normal()),))
        for r in records
    ]
    site_a = tmp_path / "site_a.csv"
    site_b = tmp_path / "site_b.csv"
    write_records_csv(site_a, records[:250])
    write_records_csv(site_b, records[250:])
    config = tmp_path / "study.toml"
    config.write_text(
        "\n".join(
            [
                'mode = "unweighted"',
                f'site_files = ["{site_a}", "{site_b}"]',
                "eval_times = [3.0, 6.0, 10.0, 18.0]",
                "t_max = 40.0",
            ]
        )
    )
    return tmp_path


class TestRun:
    def test_happy_path_writes_three_files(self, study_dir, capsys):
        out = study_dir / "out"
        code = main(["run", "--config", str(study_dir / "study.toml"), "--out-dir", str(out)])
        assert code == 0
        for name in ("result.json", "curves.csv", "logrank.json"):
            assert (out / name).exists()
        result = json.loads((out / "result.json").read_text())
        assert set(result["groups"]) == {"arm0", "arm1", "overall"}
        lines = (out / "curves.csv").read_text().strip().splitlines()
        assert lines[0] == "group,time,estimate,lower,upper"
        assert len(lines) == 1 + 3 * 4

    def test_json_config_fallback(self, study_dir):
        cfg = {
            "mode": "unweighted",
            "site_files": [str(study_dir / "site_a.csv"), str(study_dir / "site_b.csv")],
            "eval_times": [3.0, 6.0],
            "t_max": 40.0,
        }
        path = study_dir / "study.json"
        path.write_text(json.dumps(cfg))
        assert main(["run", "--config", str(path), "--out-dir", str(study_dir / "o2")]) == 0

    def test_missing_site_file_names_path(self, study_dir, capsys):
        cfg = study_dir / "bad.toml"
        cfg.write_text(
            'mode = "unweighted"\nsite_files = ["/nonexistent/site.csv"]\neval_times = [3.0]\n'
        )
        code = main(["run", "--config", str(cfg)])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("distkm: error:")
        assert "/nonexistent/site.csv" in err

    def test_missing_config(self, capsys):
        assert main(["run", "--config", "/no/such/config.toml"]) == 2

    def test_ipw_without_covariates_rejected(self, tmp_path, capsys):
        records = draw_exponential_records(300, seed=3, arm_prob=0.5)
        site = tmp_path / "s.csv"
        write_records_csv(site, records)  # has arm but no z columns
        cfg = tmp_path / "c.toml"
        cfg.write_text(f'mode = "ipw"\nsite_files = ["{site}"]\neval_times = [3.0]\n')
        assert main(["run", "--config", str(cfg)]) == 2
        assert "covariate" in capsys.readouterr().err

    def test_flag_overrides(self, study_dir):
        out = study_dir / "out3"
        code = main(
            [
                "run",
                "--config",
                str(study_dir / "study.toml"),
                "--out-dir",
                str(out),
                "--eval-times",
                "4.0,8.0",
                "--batch-size",
                "4",
            ]
        )
        assert code == 0
        result = json.loads((out / "result.json").read_text())
        assert result["eval_times"] == [4.0, 8.0]


class TestSimulate:
    def test_deterministic_metrics(self, tmp_path):
        out1, out2 = tmp_path / "m1", tmp_path / "m2"
        args = ["simulate", "A", "--repeats", "2", "--seed", "7"]
        assert main(args + ["--out-dir", str(out1)]) == 0
        assert main(args + ["--out-dir", str(out2)]) == 0
        b1 = (out1 / "metrics_A.json").read_bytes()
        b2 = (out2 / "metrics_A.json").read_bytes()
        assert b1 == b2
        assert (out1 / "repeats_A.csv").exists()

    def test_ten_repeats_complete_quickly(self, tmp_path):
        import time

        t0 = time.time()
        assert main(["simulate", "A", "--repeats", "10", "--out-dir", str(tmp_path)]) == 0
        assert time.time() - t0 < 120.0

    def test_zero_repeats_rejected(self, capsys):
        assert main(["simulate", "A", "--repeats", "0"]) == 2

    def test_unknown_scenario_rejected(self, capsys):
        assert main(["simulate", "Z", "--repeats", "1"]) == 2


class TestInspect:
    def make_message(self, tmp_path):
        records = draw_exponential_records(300, seed=30, arm_prob=0.5)
        cfg = FederationConfig(mode="unweighted", eval_times=(3.0, 8.0), t_max=40.0)
        site = Site(SiteDataset(site_id="lead", records=tuple(records)))
        blob = site.initialize_curves(cfg)
        path = tmp_path / "message.json"
        path.write_bytes(blob)
        return path

    def test_valid_message_summary(self, tmp_path, capsys):
        path = self.make_message(tmp_path)
        assert main(["inspect", str(path)]) == 0
        out = capsys.readouterr().out
        assert "no individual-level fields" in out
        assert "knots" in out

    def test_tampered_message_rejected(self, tmp_path, capsys):
        path = self.make_message(tmp_path)
        d = json.loads(path.read_text())
        d["group_params"]["overall"]["knots"] = d["group_params"]["overall"]["knots"][::-1]
        path.write_text(json.dumps(d))
        assert main(["inspect", str(path)]) == 2
        assert "group_params.overall.knots" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert main(["inspect", "/no/such/message.json"]) == 2

    def test_field_inventory_independent_of_n(self, tmp_path, capsys):
        small = self.make_message(tmp_path)
        assert main(["inspect", str(small)]) == 0
        out_small = capsys.readouterr().out
        records = draw_exponential_records(4000, seed=31, arm_prob=0.5)
        cfg = FederationConfig(mode="unweighted", eval_times=(3.0, 8.0), t_max=40.0)
        blob = Site(SiteDataset(site_id="lead", records=tuple(records))).initialize_curves(cfg)
        big = tmp_path / "big.json"
        big.write_bytes(blob)
        assert main(["inspect", str(big)]) == 0
        out_big = capsys.readouterr().out
        inv_small = [ln for ln in out_small.splitlines() if ln.startswith("field inventory")]
        inv_big = [ln for ln in out_big.splitlines() if ln.startswith("field inventory")]
        assert inv_small == inv_big
