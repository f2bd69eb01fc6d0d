import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from paleo import cli
from paleo.config import RunConfig, apply_override, deep_merge, load_defaults, resolve
from paleo.errors import ConfigurationError

FAST = ["--iterations", "200"]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("PALEO_SEED", raising=False)


class TestConfig:
    def test_defaults_encode_priors(self):
        d = load_defaults()
        assert d["priors"]["loss_mode"] == 0.0001 and d["priors"]["scaling_mode"] == 150
        assert d["svi"] == {"iterations": 25000, "learning_rate": 0.001, "mc_samples": 8, "elbo_log_stride": 10, "init_scale": 0.5}
        rc = RunConfig.from_dict(d)
        assert rc.grid.n_bins == 120 and rc.seed == 42

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="svi.nope"):
            deep_merge(load_defaults(), {"svi": {"nope": 1}})

    def test_override_parsing(self):
        d = apply_override(load_defaults(), "svi.learning_rate=0.01")
        assert d["svi"]["learning_rate"] == 0.01
        d = apply_override(d, "data.binning_rule=any")
        assert d["data"]["binning_rule"] == "any"
        with pytest.raises(ConfigurationError):
            apply_override(d, "svi.learning_rate")

    def test_precedence(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"seed": 1, "svi": {"iterations": 10}}))
        assert resolve(str(f), env={})["seed"] == 1
        assert resolve(str(f), env={"PALEO_SEED": "2"})["seed"] == 2
        assert resolve(str(f), ["seed=3"], env={"PALEO_SEED": "2"})["seed"] == 3
        assert resolve(str(f), ["seed=3"], env={"PALEO_SEED": "2"}, seed=4)["seed"] == 4
        assert resolve(str(f), env={}, **{"svi.iterations": None})["svi"]["iterations"] == 10

    @pytest.mark.parametrize(
        "patch",
        [{"seed": -1}, {"svi": {"iterations": 0}}, {"grid": {"bin_width": 7}}, {"priors": {"sampling_mode": 0.9, "sampling_std": 0.5}}, {"report": {"band": "hdi"}}],
    )
    def test_invalid_values(self, patch):
        with pytest.raises(ConfigurationError):
            RunConfig.from_dict(deep_merge(load_defaults(), patch))

    def test_bad_env_seed(self):
        with pytest.raises(ConfigurationError, match="PALEO_SEED"):
            resolve(env={"PALEO_SEED": "abc"})


class TestSimulate:
    def test_default_writes_120_rows(self, tmp_path):
        assert run("simulate", "--out-dir", tmp_path) == 0
        lines = (tmp_path / "counts.csv").read_text().splitlines()
        assert len(lines) == 121
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["config"]["seed"] == 42 and truth["truth"]["params"]["loss_rate"] == 0.00065

    def test_tiny_p_gives_zero_counts(self, tmp_path):
        assert run("simulate", "--out-dir", tmp_path, "--set", "truth.sampling_prob=1e-12") == 0
        rows = (tmp_path / "counts.csv").read_text().splitlines()[1:]
        assert all(r.endswith(",0") for r in rows)

    def test_same_seed_same_files(self, tmp_path, monkeypatch):
        for d in ("a", "b"):
            (tmp_path / d).mkdir()
            monkeypatch.chdir(tmp_path / d)
            assert run("simulate") == 0
        for name in ("counts.csv", "truth.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PALEO_SEED", "7")
        assert run("simulate", "--out-dir", tmp_path) == 0
        assert json.loads((tmp_path / "truth.json").read_text())["truth"]["seed"] == 7

    def test_unwritable_path(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("simulate", "--out-dir", blocker / "sub") == 2
        assert "error" in capsys.readouterr().err

    def test_bad_config_exit_2(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert run("simulate", "--config", cfg, "--out-dir", tmp_path) == 2


class TestFit:
    def test_pipeline(self, tmp_path):
        assert run("simulate", "--out-dir", tmp_path) == 0
        assert run("fit", "--out-dir", tmp_path, *FAST) == 0
        for name in ("fit.json", "summary.json", "trajectory.csv", "parameters.csv", "elbo_trace.csv"):
            assert (tmp_path / name).stat().st_size > 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["config"]["svi"]["iterations"] == 200
        assert len((tmp_path / "elbo_trace.csv").read_text().splitlines()) == 21
        assert len((tmp_path / "trajectory.csv").read_text().splitlines()) == 121

    def test_missing_input_leaves_nothing(self, tmp_path):
        out = tmp_path / "out"
        assert run("fit", "--data", tmp_path / "absent.csv", "--out-dir", out, *FAST) == 2
        assert not out.exists() or not any(out.iterdir())

    def test_parse_failure(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("bin_start_year,bin_end_year,count\n0,100,-3\n")
        assert run("fit", "--data", bad, "--out-dir", tmp_path, *FAST) == 2
        assert not (tmp_path / "fit.json").exists()

    def test_settlement_input(self, tmp_path):
        recs = tmp_path / "sites.csv"
        recs.write_text("site_id,start_year,end_year\nA,-5000,-4000\nB,-300,200\nC,100,130\n")
        assert run("fit", "--settlements", recs, "--rule", "any", "--out-dir", tmp_path, *FAST) == 0
        doc = json.loads((tmp_path / "summary.json").read_text())
        assert doc["config"]["data"]["binning_rule"] == "any"

    def test_divergence_exit_3(self, tmp_path):
        assert run("simulate", "--out-dir", tmp_path) == 0
        assert run("fit", "--out-dir", tmp_path, "--learning-rate", "1e9", "--iterations", "500") == 3
        assert not (tmp_path / "fit.json").exists()


class TestReport:
    def test_after_fit(self, tmp_path):
        run("simulate", "--out-dir", tmp_path)
        run("fit", "--out-dir", tmp_path, *FAST)
        assert run("report", "--out-dir", tmp_path, "--band", "iqr") == 0
        first = {}
        for name in ("trajectory.svg", "densities.svg"):
            ET.fromstring((tmp_path / name).read_bytes())
            first[name] = (tmp_path / name).read_bytes()
        assert run("report", "--out-dir", tmp_path) == 0
        for name, data in first.items():
            assert (tmp_path / name).read_bytes() == data

    def test_missing_summary(self, tmp_path):
        assert run("report", "--out-dir", tmp_path) == 2

    def test_band_choices(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            run("report", "--out-dir", tmp_path, "--band", "hdi")
        assert err.value.code == 2


class TestVerify:
    def test_quick(self, tmp_path, capsys):
        assert run("verify", "--quick", "--out-dir", tmp_path) == 0
        doc = json.loads((tmp_path / "verify.json").read_text())
        assert doc["passed"] and doc["quick"]
        (check,) = doc["checks"]
        assert check["name"] == "gradient_finite_difference"
        assert check["measured"]["max_relative_error"] <= check["threshold"]["max_relative_error"]
        assert "PASS" in capsys.readouterr().out

    def test_failure_exit_4_names_check(self, tmp_path, capsys):
        code = run("verify", "--quick", "--out-dir", tmp_path, "--set", "verify.gradient_threshold=1e-300")
        assert code == 4
        assert "gradient_finite_difference" in capsys.readouterr().err
        assert json.loads((tmp_path / "verify.json").read_text())["passed"] is False


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "paleo.cli", "simulate", "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "paleo.cli", "fit", "--data", str(tmp_path / "nope.csv")], capture_output=True, text=True)
    assert proc.returncode == 2 and "not found" in proc.stderr
