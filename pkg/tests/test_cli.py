import json

import numpy as np
import pytest

from cli.commands import (EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NOT_MIXABLE, EXIT_OK,
                          EXIT_UNDECIDED, main)
from cli.config import RunConfig, apply_overrides, cost_from_config, parse_config
from core.errors import ConfigError
from core.utils import read_matrix_csv

NINES = {"family": "discrete_uniform", "params": {"points": list(range(1, 10))}, "repeat": 2}


@pytest.fixture
def run(tmp_path, capsys):
    """Write a config, call main and return (exit code, parsed stdout JSON)."""
    def _run(command, doc, *flags):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        code = main(command + ["--config", str(path), *flags])
        out = capsys.readouterr().out
        return code, (json.loads(out) if out.strip() else None)
    return _run


class TestCouple:
    def test_comonotone_nines(self, run, tmp_path):
        matrix_path = tmp_path / "m.csv"
        code, out = run(["couple"], {"margins": [NINES], "n": 9, "grid_mode": "shifted"},
                        "--emit-matrix", str(matrix_path))
        assert code == EXIT_OK
        assert out["row_sum_variance"] == pytest.approx(80 / 3)
        values = read_matrix_csv(str(matrix_path))
        np.testing.assert_array_equal(values, np.column_stack([np.arange(1, 10)] * 2))

    def test_countermonotone_nines(self, run):
        code, out = run(["couple"], {"margins": [NINES], "n": 9, "grid_mode": "shifted"},
                        "--kind", "countermonotone", "--inline-matrix")
        assert code == EXIT_OK
        assert out["row_sum_range"] == 0.0
        assert out["matrix"]["columns"][1] == list(range(9, 0, -1))
        assert out["sigma_countermonotone"]["ok"] is True

    def test_pairwise_countermonotone(self, run, tmp_path):
        plot_path = tmp_path / "plot.csv"
        doc = {"margins": [{"family": "bernoulli", "params": {"p": 1 / 3}, "repeat": 3}], "n": 9}
        code, out = run(["couple"], doc, "--kind", "pairwise_countermonotone", "--emit-plot", str(plot_path))
        assert code == EXIT_OK
        assert out["d"] == 3
        assert out["pcm"]["exists"] is True
        assert out["pcm"]["via"] in ("da1", "da2", "pair")
        assert out["config"]["kind"] == "pairwise_countermonotone"
        lines = plot_path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "u,f1,f2,f3"
        assert len(lines) == 10

    def test_pairwise_countermonotone_infeasible(self, run):
        doc = {"margins": [{"family": "uniform", "params": {"a": 0, "b": 1}, "repeat": 3}], "n": 9}
        code, _ = run(["couple"], doc, "--kind", "pairwise_countermonotone")
        assert code == EXIT_INFEASIBLE

    def test_countermonotone_needs_two(self, run):
        doc = {"margins": [{"family": "uniform", "params": {"a": 0, "b": 1}, "repeat": 3}], "n": 9}
        code, _ = run(["couple"], doc, "--kind", "countermonotone")
        assert code == EXIT_INFEASIBLE

    def test_plot_header_pair(self, run, tmp_path):
        plot_path = tmp_path / "plot.csv"
        code, _ = run(["couple"], {"margins": [NINES], "n": 9}, "--emit-plot", str(plot_path))
        assert code == EXIT_OK
        assert plot_path.read_text(encoding="utf-8").splitlines()[0] == "u,f1,f2"


class TestMixcheck:
    def test_uniforms_mixable(self, run):
        doc = {"margins": [{"family": "uniform", "params": {"a": 0, "b": 1}, "repeat": 3}],
               "n": 12, "restarts": 10}
        code, out = run(["mixcheck"], doc)
        assert code == EXIT_OK
        assert out["report"]["verdict"] == "mixable"
        assert out["report"]["center"] == pytest.approx(1.5)

    def test_unbalanced_normals(self, run):
        doc = {"margins": [{"family": "normal", "params": {"mu": 0, "sigma": s}} for s in (3, 1, 1)],
               "n": 50, "restarts": 2}
        code, out = run(["mixcheck"], doc)
        assert code == EXIT_NOT_MIXABLE
        assert out["report"]["verdict"] == "not_mixable"

    def test_pareto_not_mixable(self, run):
        doc = {"margins": [{"family": "pareto", "params": {"theta": 2}, "repeat": 3}], "n": 50}
        code, _ = run(["mixcheck"], doc)
        assert code == EXIT_NOT_MIXABLE

    def test_two_point_undecided(self, run):
        doc = {"margins": [{"family": "discrete_uniform", "params": {"points": [0, 1]}, "repeat": 3}],
               "n": 4, "grid_mode": "shifted", "restarts": 5}
        code, out = run(["mixcheck"], doc)
        assert code == EXIT_UNDECIDED
        assert out["report"]["residual"] >= 1.0

    def test_boundary_normals_report_covariance(self, run):
        doc = {"margins": [{"family": "normal", "params": {"mu": 0, "sigma": s}} for s in (2, 1, 1)],
               "n": 64, "restarts": 4}
        code, out = run(["mixcheck"], doc)
        assert code == EXIT_OK
        joint = out["normal_joint_mix"]
        assert joint["feasible"] is True
        assert np.allclose(np.sum(joint["covariance"]), 0.0)
        assert out["supports"][0]["a"] == "-inf" and out["supports"][0]["sd"] == pytest.approx(2.0)
        assert out["config"]["margins"][0] == "normal(mu=0, sigma=2)"

    def test_infeasible_covariance_reported(self, run):
        doc = {"margins": [{"family": "normal", "params": {"mu": 0, "sigma": s}} for s in (3, 1, 1)],
               "n": 50, "restarts": 2}
        _, out = run(["mixcheck"], doc)
        assert out["normal_joint_mix"]["feasible"] is False
        assert out["normal_joint_mix"]["covariance"] is None


class TestBounds:
    def test_min_product_nines(self, run):
        code, out = run(["bounds", "min-product"], {"margins": [NINES], "n": 9, "grid_mode": "shifted"})
        assert code == EXIT_OK
        assert out["bound"] == "min-product"
        assert out["result"]["value"] == pytest.approx(165 / 9)

    def test_spearman_pair(self, run):
        code, out = run(["bounds", "spearman"], {"d": 2, "n": 200})
        assert code == EXIT_OK
        assert out["result"]["rho_min"] == pytest.approx(-1.0, abs=1e-4)
        assert out["result"]["rho_max"] == 1.0

    def test_worst_var_uniform_pair(self, run):
        doc = {"margins": [{"family": "uniform", "params": {"a": 0, "b": 1}, "repeat": 2}], "n": 1000}
        code, out = run(["bounds", "worst-var"], doc, "--alpha", "0.5")
        assert code == EXIT_OK
        assert out["result"]["value"] == pytest.approx(1.5, abs=2e-3)
        assert out["result"]["diagnostics"]["comonotone_var"] == pytest.approx(1.0)

    def test_tail_prob_uniform_pair(self, run):
        doc = {"margins": [{"family": "uniform", "params": {"a": 0, "b": 1}, "repeat": 2}],
               "n": 1000, "k": 1.5}
        code, out = run(["bounds", "tail-prob"], doc)
        assert code == EXIT_OK
        assert out["result"]["value"] == pytest.approx(0.5, abs=5e-3)

    def test_pearson(self, run):
        doc = {"margins": [{"family": "uniform", "params": {"a": 0, "b": 1}, "repeat": 2}], "n": 100}
        code, out = run(["bounds", "pearson"], doc)
        assert code == EXIT_OK
        assert out["result"]["rho_min"] == pytest.approx(-1.0)

    def test_supermodular_max_stop_loss(self, run):
        doc = {"margins": [NINES], "n": 9, "grid_mode": "shifted",
               "cost": {"kind": "stop_loss", "strike": 15}}
        code, out = run(["bounds", "supermodular-max"], doc)
        assert code == EXIT_OK
        assert out["result"]["value"] == pytest.approx(4 / 9)

    def test_missing_alpha(self, run):
        code, _ = run(["bounds", "worst-var"], {"margins": [NINES], "n": 100})
        assert code == EXIT_CONFIG

    def test_flag_overrides_config(self, run):
        doc = {"margins": [{"family": "uniform", "params": {"a": 0, "b": 1}, "repeat": 2}],
               "n": 1000, "alpha": 0.9}
        code, out = run(["bounds", "best-var"], doc, "--alpha", "0.5")
        assert code == EXIT_OK
        assert out["result"]["diagnostics"]["alpha"] == 0.5


class TestConfig:
    def test_unknown_key(self, run):
        code, _ = run(["couple"], {"margins": [NINES], "colour": "red"})
        assert code == EXIT_CONFIG

    def test_bad_margin(self, run):
        code, _ = run(["couple"], {"margins": [{"family": "normal", "params": {"mu": 0, "sigma": -1}}]})
        assert code == EXIT_CONFIG

    def test_bad_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json", encoding="utf-8")
        assert main(["couple", "--config", str(path)]) == EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert main(["couple", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG

    def test_no_margins(self, run):
        code, _ = run(["mixcheck"], {"n": 10})
        assert code == EXIT_CONFIG

    def test_parse_defaults(self):
        config = parse_config({"margins": [NINES]})
        assert len(config.margins) == 2
        assert (config.n, config.grid_mode, config.restarts) == (1000, "midpoint", 20)

    def test_override_validation(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"alpha": 1.5})
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"restarts": 0})

    def test_unknown_kind(self, run):
        code, _ = run(["couple"], {"margins": [NINES], "kind": "gaussian"})
        assert code == EXIT_CONFIG

    def test_override_kind_validated(self):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig(), {"kind": "gaussian"})
        assert apply_overrides(RunConfig(), {"kind": "joint_mix"}).kind == "joint_mix"

    def test_bound_output_names_cost(self, run):
        code, out = run(["bounds", "supermodular-max"], {"margins": [NINES], "n": 9, "grid_mode": "shifted"})
        assert code == EXIT_OK
        assert out["result"]["cost"] == {"kind": "variance", "label": "variance", "direction": "minimize"}
        assert out["config"]["n"] == 9

    @pytest.mark.parametrize("entry", [{"kind": "cubic"}, {"kind": "stop_loss"}, {"kind": "variance", "k": 1}])
    def test_bad_cost(self, entry):
        with pytest.raises(ConfigError):
            cost_from_config(entry)


class TestDeterminism:
    DOC = {"margins": [{"family": "exponential", "params": {"rate": 1}, "repeat": 3}],
           "n": 400, "restarts": 6, "seed": 11, "alpha": 0.9}

    def _bytes(self, tmp_path, name):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(self.DOC), encoding="utf-8")
        out = tmp_path / name
        assert main(["bounds", "worst-var", "--config", str(config), "--output", str(out)]) == EXIT_OK
        return out.read_bytes()

    def test_repeat_runs_identical(self, tmp_path):
        assert self._bytes(tmp_path, "a.json") == self._bytes(tmp_path, "b.json")

    def test_thread_count_does_not_matter(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FRECHET_THREADS", "1")
        single = self._bytes(tmp_path, "single.json")
        monkeypatch.setenv("FRECHET_THREADS", "4")
        assert self._bytes(tmp_path, "multi.json") == single
