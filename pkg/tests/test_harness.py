import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from afaeval.cli import main as cli_main
from afaeval.harness import (
    ConfigError,
    ExperimentConfig,
    apply_override,
    run_experiment,
)

ROOT = Path(__file__).resolve().parents[1]
MAR_CONFIG = ROOT / "configs" / "synthetic_mar.json"
MNAR_CONFIG = ROOT / "configs" / "synthetic_mnar.json"

FAST = [
    "data.n=2000",
    "bootstrap.B=10",
    "nuisances.q_regressor=ridge",
    'policies=[{"kind": "subset_random", "p_acquire": 0.5, "name": "random-50"}]',
]


class TestConfigValidation:
    def test_shipped_configs_valid(self):
        ExperimentConfig.from_file(MAR_CONFIG)
        ExperimentConfig.from_file(MNAR_CONFIG)

    def test_unknown_estimator(self):
        with pytest.raises(ConfigError, match="unknown estimator"):
            ExperimentConfig.from_file(MAR_CONFIG, ['estimators=["bogus"]'])

    def test_mnar_with_mar_only_estimator_names_hybrid(self):
        with pytest.raises(ConfigError, match="ipw-semi-miss"):
            ExperimentConfig.from_file(
                MNAR_CONFIG,
                ['estimators=["ipw-semi"]', "nuisances.adjustment=[]"],
            )

    def test_hybrid_requires_adjustment(self):
        with pytest.raises(ConfigError, match="adjustment"):
            ExperimentConfig.from_file(MNAR_CONFIG, ["nuisances.adjustment=[]"])

    def test_splits_must_sum_to_one(self):
        with pytest.raises(ConfigError, match="splits"):
            ExperimentConfig.from_file(MAR_CONFIG, ["splits.train=0.5"])

    def test_missing_schema(self):
        with pytest.raises(ConfigError, match="schema"):
            ExperimentConfig.from_dict({"data": {"kind": "synthetic", "n": 10}})

    def test_policy_needs_name(self):
        with pytest.raises(ConfigError, match="name"):
            ExperimentConfig.from_file(
                MAR_CONFIG, ['policies=[{"kind": "subset_random", "p_acquire": 0.5}]']
            )

    def test_unknown_target(self):
        with pytest.raises(ConfigError, match="target"):
            ExperimentConfig.from_file(MAR_CONFIG, ['targets=["J_bogus"]'])

    def test_override_parsing(self):
        cfg = apply_override({"a": {"b": 1}}, "a.b=2")
        assert cfg["a"]["b"] == 2
        cfg = apply_override({}, "x.y=hello")
        assert cfg["x"]["y"] == "hello"
        with pytest.raises(ConfigError):
            apply_override({}, "no-equals-sign")


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = ExperimentConfig.from_file(MAR_CONFIG, FAST)
    run_experiment(cfg, out)
    return out


class TestRunExperiment:
    def test_artifacts_exist(self, run_dir):
        for name in (
            "estimates.csv",
            "convergence.csv",
            "diagnostics.json",
            "resolved_config.json",
        ):
            assert (run_dir / name).exists()

    def test_estimates_columns(self, run_dir):
        header = (run_dir / "estimates.csv").read_text().splitlines()[0]
        assert header == (
            "estimator,policy,target,point,ci_low,ci_high,n_rows,n_traj,"
            "ess,mean_weight,floored,forced_stop_frac"
        )

    def test_convergence_final_equals_full_sample(self, run_dir):
        est_lines = (run_dir / "estimates.csv").read_text().splitlines()[1:]
        points = {}
        for line in est_lines:
            f = line.split(",")
            points[(f[0], f[1], f[2])] = float(f[3])
        conv_lines = (run_dir / "convergence.csv").read_text().splitlines()[1:]
        finals = {}
        for line in conv_lines:
            f = line.split(",")
            finals[(f[0], f[1], f[2])] = float(f[4])  # last row per key wins
        for key, pt in points.items():
            assert finals[key] == pt

    def test_rerun_byte_identical(self, run_dir, tmp_path):
        cfg = ExperimentConfig.from_file(MAR_CONFIG, FAST)
        out2 = tmp_path / "again"
        run_experiment(cfg, out2)
        for name in (
            "estimates.csv",
            "convergence.csv",
            "diagnostics.json",
            "resolved_config.json",
        ):
            assert (out2 / name).read_bytes() == (run_dir / name).read_bytes()

    def test_resolved_config_reproduces(self, run_dir, tmp_path):
        resolved = json.loads((run_dir / "resolved_config.json").read_text())
        cfg = ExperimentConfig.from_dict(resolved)
        out2 = tmp_path / "from_resolved"
        run_experiment(cfg, out2)
        assert (out2 / "estimates.csv").read_bytes() == (
            run_dir / "estimates.csv"
        ).read_bytes()


class TestCli:
    def test_count_traj(self):
        r = CliRunner().invoke(cli_main, ["count-traj", "10"])
        assert r.exit_code == 0
        assert r.output.strip() == "9864101"

    def test_count_traj_negative(self):
        r = CliRunner().invoke(cli_main, ["count-traj", "--", "-3"])
        assert r.exit_code == 2

    def test_config_error_exit_code(self, tmp_path):
        r = CliRunner().invoke(
            cli_main,
            [
                "experiment",
                "--config",
                str(MAR_CONFIG),
                "--out",
                str(tmp_path / "x"),
                "--set",
                'estimators=["bogus"]',
            ],
        )
        assert r.exit_code == 2

    def test_missing_config_file(self, tmp_path):
        r = CliRunner().invoke(
            cli_main,
            ["experiment", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)],
        )
        assert r.exit_code == 2

    def test_generate(self, tmp_path):
        out = tmp_path / "data.csv"
        r = CliRunner().invoke(
            cli_main,
            ["generate", "--config", str(MAR_CONFIG), "--out", str(out), "--set", "data.n=50"],
        )
        assert r.exit_code == 0
        assert len(out.read_text().splitlines()) == 51

    def test_simulate(self, tmp_path):
        out = tmp_path / "traj.csv"
        r = CliRunner().invoke(
            cli_main,
            ["simulate", "--config", str(MAR_CONFIG), "--out", str(out), "--set", "data.n=200"],
        )
        assert r.exit_code == 0
        assert out.exists()

    def test_estimate_prints_csv(self, tmp_path):
        r = CliRunner().invoke(
            cli_main,
            [
                "estimate",
                "--config",
                str(MAR_CONFIG),
                "--out",
                str(tmp_path / "est"),
                *sum((["--set", s] for s in FAST), []),
            ],
        )
        assert r.exit_code == 0
        assert r.output.startswith("estimator,policy,target,point")
