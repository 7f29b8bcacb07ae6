from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from misokg import cli
from misokg.loop import Record, records_to_csv, write_sidecar

EXPERIMENT = {"run": {"problem": "synthetic"}, "costs": None, "noises": None}


def write_rep(directory: Path, seed: int, points, experiment=EXPERIMENT, initial_cost=1.0,
              baseline=0.0, initial_true=0.0):
    """One synthetic replication: ``points`` is a list of (cum_cost, true_value)."""
    recs = [Record(i + 1, 1, (0.0,), 0.0, 1.0, float(c), (0.0,), 0.0, float(v))
            for i, (c, v) in enumerate(points)]
    (directory / f"rep_{seed:05d}.csv").write_text(records_to_csv(recs, 1))
    write_sidecar(directory / f"rep_{seed:05d}.json",
                  {"seed": seed, "initial_cost": initial_cost, "baseline": baseline,
                   "initial_rec_true_value": initial_true, "experiment": experiment})


def read_summary(path: Path) -> dict:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {k: np.atleast_1d(data[k]) for k in data.dtype.names}


class TestConfig:
    def test_packaged_table_values_verbatim(self):
        exp = cli.load_config("ato.toml")
        assert exp.costs == [17.1, 0.5, 3.9]
        assert exp.noises == [0.056, 2.944, 0.332]
        lam = cli.load_config("rosenbrock_lam.toml")
        assert lam.costs == [1000.0, 1.0]
        assert lam.noises == [1e-3, 1e-6]
        alt = cli.load_config("rosenbrock_alternative.toml")
        assert alt.costs == [50.0, 1.0]
        assert alt.noises[0] == 1.0

    def test_unknown_field_named(self):
        with pytest.raises(cli.ConfigError, match="budget.limt"):
            cli.parse_config({"problem": {"name": "rosenbrock_lam"}, "budget": {"limt": 3}})

    def test_wrong_type_named(self):
        with pytest.raises(cli.ConfigError, match="acquisition.restarts"):
            cli.parse_config({"problem": {"name": "rosenbrock_lam"}, "acquisition": {"restarts": "ten"}})

    def test_wrong_source_count(self):
        with pytest.raises(cli.ConfigError, match="sources.costs"):
            cli.parse_config({"problem": {"name": "rosenbrock_lam"}, "sources": {"costs": [1, 2, 3]}})

    def test_nonpositive_budget(self):
        with pytest.raises(cli.ConfigError, match="budget.limit"):
            cli.parse_config({"problem": {"name": "rosenbrock_lam"}, "budget": {"limit": 0}})

    def test_replication_seeds(self):
        exp = cli.parse_config({"problem": {"name": "rosenbrock_lam"}, "run": {"seed": 40}})
        assert [exp.replication_config(r).seed for r in range(3)] == [40, 41, 42]

    def test_custom_problem_file(self, tmp_path):
        (tmp_path / "p.toml").write_text(
            'box = [[0, 1]]\n[[sources]]\nexpr = "-(x_0 - 0.5)^2"\ncost = 2\nnoise = 0.0\n'
            '[[sources]]\nexpr = "-(x_0 - 0.4)^2"\ncost = 1\nnoise = 0.0\n')
        (tmp_path / "c.toml").write_text('[problem]\nfile = "p.toml"\n[budget]\nlimit = 1\n')
        exp = cli.load_config(str(tmp_path / "c.toml"))
        assert cli.build_problem(exp.run).n_sources == 2

    def test_estimate_mode(self):
        exp = cli.parse_config({"problem": {"name": "rosenbrock_alternative"},
                                "sources": {"noises": "estimate", "estimate_repeats": 40}})
        p = cli.experiment_problem(exp, 0)
        assert p.cost_noise.costs == (50.0, 1.0)
        assert p.cost_noise.noises[0] == pytest.approx(1.0, rel=0.35)


class TestRun:
    def test_three_replications_deterministic(self, tmp_path, capsys):
        args = ["run", "--config", "rosenbrock_lam.toml", "--replications", "3", "--seed", "7",
                "--budget", "2"]
        assert cli.main(args + ["--output", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--output", str(tmp_path / "b")]) == 0
        names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
        assert names == ["rep_00007.csv", "rep_00008.csv", "rep_00009.csv"]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_missing_config_names_path(self, tmp_path, capsys):
        missing = str(tmp_path / "missing.toml")
        assert cli.main(["run", "--config", missing]) == 1
        assert missing in capsys.readouterr().err

    def test_budget_override_in_sidecar(self, tmp_path):
        assert cli.main(["run", "--config", "rosenbrock_lam.toml", "--replications", "1",
                         "--budget", "1", "--output", str(tmp_path)]) == 0
        side = json.loads((tmp_path / "rep_00000.json").read_text())
        assert side["config"]["budget"] == 1.0
        assert side["hyperparameters"]["kernel"]

    def test_output_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert cli.main(["run", "--config", "rosenbrock_lam.toml", "--replications", "1",
                         "--budget", "1"]) == 0
        assert (tmp_path / "env" / "rep_00000.csv").is_file()

    def test_bad_strategy_override(self, tmp_path, capsys):
        assert cli.main(["run", "--config", "rosenbrock_lam.toml", "--strategy", "random",
                         "--output", str(tmp_path)]) == 1
        assert "--strategy" in capsys.readouterr().err


class TestAggregate:
    def test_single_replication_bands_coincide(self, tmp_path):
        write_rep(tmp_path, 0, [(2.0, 1.0), (3.0, 4.0)])
        assert cli.main(["aggregate", str(tmp_path)]) == 0
        s = read_summary(tmp_path / "summary.csv")
        np.testing.assert_array_equal(s["lower_2se"], s["mean_gain"])
        np.testing.assert_array_equal(s["upper_2se"], s["mean_gain"])
        np.testing.assert_array_equal(s["cum_cost_grid"], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(s["mean_gain"], [0.0, 1.0, 4.0])

    def test_constant_gain(self, tmp_path):
        for seed in range(5):
            write_rep(tmp_path, seed, [(2.0 + seed, 3.5), (9.0 + seed, 3.5)], initial_true=3.5)
        cli.main(["aggregate", str(tmp_path)])
        s = read_summary(tmp_path / "summary.csv")
        np.testing.assert_array_equal(s["mean_gain"], 3.5)

    def test_band_half_width(self, tmp_path):
        rng = np.random.default_rng(5)
        for seed in range(100):
            g = rng.normal(10.0, 1.0)
            write_rep(tmp_path, seed, [(5.0, g)], initial_true=g)
        cli.main(["aggregate", str(tmp_path)])
        s = read_summary(tmp_path / "summary.csv")
        half = (s["upper_2se"] - s["lower_2se"]) / 2
        assert half[-1] == pytest.approx(0.2, rel=0.25)
        assert s["n_reps"][-1] == 100

    def test_heterogeneous_experiments_rejected(self, tmp_path, capsys):
        write_rep(tmp_path, 0, [(2.0, 1.0)])
        write_rep(tmp_path, 1, [(2.0, 1.0)], experiment={"run": {"problem": "other"}})
        assert cli.main(["aggregate", str(tmp_path)]) == 1

    def test_empty_directory(self, tmp_path):
        assert cli.main(["aggregate", str(tmp_path)]) == 1

    def test_prints_final_mean_and_cost(self, tmp_path, capsys):
        write_rep(tmp_path, 0, [(2.0, 1.0), (4.0, 3.0)])
        write_rep(tmp_path, 1, [(2.0, 1.0), (6.0, 5.0)])
        cli.main(["aggregate", str(tmp_path)])
        out = capsys.readouterr().out
        assert "final mean gain: 4" in out
        assert "mean cumulative cost: 5" in out


@pytest.mark.property
class TestAggregateProperties:
    def test_order_independent(self, tmp_path):
        rng = np.random.default_rng(2)
        reps = [[(float(c), float(rng.normal())) for c in np.sort(rng.uniform(1, 10, 4))]
                for _ in range(6)]
        for name, order in (("a", range(6)), ("b", [3, 5, 0, 2, 4, 1])):
            d = tmp_path / name
            d.mkdir()
            for k, r in enumerate(order):
                write_rep(d, k, reps[r])
            cli.main(["aggregate", str(d)])
        a = read_summary(tmp_path / "a" / "summary.csv")
        b = read_summary(tmp_path / "b" / "summary.csv")
        for key in a:
            np.testing.assert_allclose(a[key], b[key], rtol=1e-14, atol=1e-14)

    def test_locf(self):
        out = cli.locf(np.array([1.0, 3.0]), np.array([5.0, 7.0]), np.array([0.5, 1.0, 2.0, 3.0, 9.0]))
        np.testing.assert_array_equal(out[1:], [5.0, 5.0, 7.0, 7.0])
        assert np.isnan(out[0])


class TestDiagnostics:
    def test_hyperfit_prints_json(self, capsys):
        assert cli.main(["hyperfit", "--config", "rosenbrock_lam.toml", "--seed", "1"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["n_initial"] == 5
        assert data["initial_cost"] == pytest.approx(5 * 1001.0)

    def test_ckg_eval_rows(self, tmp_path):
        out = tmp_path / "ckg.csv"
        assert cli.main(["ckg-eval", "--config", "rosenbrock_lam.toml", "--points", "10",
                         "--output", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "source,x_0,x_1,h,cost,ckg"
        assert len(lines) == 1 + 2 * 10
        for row in lines[1:]:
            vals = [float(v) for v in row.split(",")]
            assert vals[3] >= 0
            assert vals[5] == pytest.approx(vals[3] / vals[4])
