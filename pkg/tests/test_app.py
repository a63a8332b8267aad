"""
Tests for the command-line entry point
"""

import json
import math

import pytest

from app import EXIT_DOMAIN_ERROR, main
from utils.stream_loader import load_stream, write_stream


def _json_output(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def jump_file(jump_stream, tmp_path):
    path = tmp_path / "jump.ndjson"
    write_stream(jump_stream(T=40, delta=20, d=2), path)
    return path


class TestSimulate:
    @pytest.mark.parametrize("name", ["stream.ndjson", "stream.csv"])
    def test_writes_a_stream(self, tmp_path, name):
        path = tmp_path / name
        code = main(["simulate", "--scenario", "1", "--d", "2", "--T", "30", "--n", "8", "--delta", "15",
                     "--output", str(path)])
        assert code == 0
        batches = load_stream(path)
        assert [b.t for b in batches] == list(range(1, 31))
        assert all(b.n == 8 and b.d == 2 for b in batches)

    def test_dimension_too_small(self, tmp_path):
        code = main(["simulate", "--scenario", "4", "--d", "2", "--output", str(tmp_path / "s.ndjson")])
        assert code == EXIT_DOMAIN_ERROR


class TestDetect:
    def test_alarm_on_a_noiseless_jump(self, jump_file, capsys):
        code = main(["detect", "--input", str(jump_file), "--w", "3", "--h", "1.0", "--epsilon", "0.5",
                     "--propensity-constant", "0.5"])
        assert code == 0
        alert = _json_output(capsys)
        assert alert["delta_hat"] == 22
        assert alert["statistic"] == pytest.approx(2.0 / 3.0)
        assert alert["window"] == [16, 22]

    def test_fitted_propensity_after_burn_in(self, jump_file, capsys):
        assert main(["detect", "--input", str(jump_file), "--w", "3", "--h", "1.0", "--epsilon", "0.5"]) == 0
        assert _json_output(capsys)["delta_hat"] == 22

    def test_runs_to_end(self, jump_file, capsys):
        code = main(["detect", "--input", str(jump_file), "--w", "3", "--h", "1.0", "--epsilon", "5.0",
                     "--propensity-constant", "0.5"])
        assert code == 0
        assert _json_output(capsys) == {"ran_to_end": True, "t_last": 40}

    def test_csv_input(self, jump_stream, tmp_path, capsys):
        path = tmp_path / "jump.csv"
        write_stream(jump_stream(T=40, delta=20, d=2), path)
        code = main(["detect", "--input", str(path), "--w", "3", "--h", "1.0", "--epsilon", "0.5",
                     "--propensity-constant", "0.5"])
        assert code == 0
        assert _json_output(capsys)["delta_hat"] == 22

    def test_missing_input(self, tmp_path):
        code = main(["detect", "--input", str(tmp_path / "absent.ndjson"), "--w", "3", "--h", "1.0",
                     "--epsilon", "0.5", "--propensity-constant", "0.5"])
        assert code == EXIT_DOMAIN_ERROR

    def test_fixed_grid(self, jump_file, tmp_path, capsys):
        grid = tmp_path / "grid.json"
        grid.write_text("[[0.5, 0.5]]")
        code = main(["detect", "--input", str(jump_file), "--w", "3", "--h", "1.0", "--epsilon", "0.5",
                     "--propensity-constant", "0.5", "--grid", str(grid)])
        assert code == 0
        alert = _json_output(capsys)
        assert alert["delta_hat"] == 22
        assert alert["argmax_x"] == [0.5, 0.5]

    def test_grid_dimension_mismatch(self, jump_file, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text("[[0.1, 0.2, 0.3]]")
        code = main(["detect", "--input", str(jump_file), "--w", "3", "--h", "1.0", "--epsilon", "0.5",
                     "--propensity-constant", "0.5", "--grid", str(grid)])
        assert code == EXIT_DOMAIN_ERROR

    def test_scalar_covariate_record(self, tmp_path):
        path = tmp_path / "scalar.ndjson"
        path.write_text('{"t": 1, "i": 1, "y": 0.1, "x": 0.5, "z": 1}\n')
        code = main(["detect", "--input", str(path), "--w", "1", "--h", "1.0", "--epsilon", "0.5",
                     "--propensity-constant", "0.5"])
        assert code == EXIT_DOMAIN_ERROR

    def test_gap_in_time_index(self, jump_stream, tmp_path):
        batches = jump_stream(T=12, d=2)
        path = tmp_path / "gap.ndjson"
        write_stream(batches[:5] + batches[6:], path)
        code = main(["detect", "--input", str(path), "--w", "2", "--h", "1.0", "--epsilon", "0.5",
                     "--propensity-constant", "0.5"])
        assert code == EXIT_DOMAIN_ERROR


class TestFitPropensity:
    def test_constant_model_feeds_detect(self, jump_file, tmp_path, capsys):
        model_path = tmp_path / "propensity.json"
        code = main(["fit-propensity", "--input", str(jump_file), "--kind", "constant", "--output", str(model_path)])
        assert code == 0
        document = json.loads(model_path.read_text())
        assert document["variant"] == "constant"
        assert document["p"] == pytest.approx(0.5)

        code = main(["detect", "--input", str(jump_file), "--w", "3", "--h", "1.0", "--epsilon", "0.5",
                     "--propensity", str(model_path)])
        assert code == 0
        assert _json_output(capsys)["delta_hat"] == 22

    def test_logistic_model(self, tmp_path, capsys):
        path = tmp_path / "stream.ndjson"
        main(["simulate", "--scenario", "2", "--d", "3", "--T", "20", "--n", "40", "--delta", "10",
              "--output", str(path)])
        assert main(["fit-propensity", "--input", str(path), "--kind", "logistic"]) == 0
        document = _json_output(capsys)
        assert document["variant"] == "logistic"
        assert len(document["beta"]) == 3


class TestAdvise:
    def test_unit_plug_in(self, capsys):
        code = main(["advise", "--sigma", "1", "--n", "1", "--d", "1", "--w", "1", "--gamma", repr(math.e),
                     "--gamma-alpha", "2"])
        assert code == 0
        document = _json_output(capsys)
        assert document["gamma_1"] == pytest.approx(1.0)
        assert document["bandwidth"] == pytest.approx(1.0)
        assert "window" not in document

    def test_window_with_jump_size(self, capsys):
        code = main(["advise", "--sigma", "1", "--n", "40", "--d", "3", "--w", "3", "--gamma", "20",
                     "--gamma-alpha", "1", "--kappa", "1.0"])
        assert code == 0
        assert _json_output(capsys)["window"] >= 1

    def test_short_horizon(self, capsys):
        code = main(["advise", "--sigma", "1", "--n", "1", "--d", "1", "--w", "1", "--gamma", "0.5",
                     "--gamma-alpha", "2"])
        assert code == 0
        assert _json_output(capsys)["bandwidth"] == pytest.approx(1.0)


class TestCalibrate:
    def test_small_calibration(self, tmp_path):
        path = tmp_path / "calibration.json"
        code = main(["calibrate", "--scenario", "1", "--d", "2", "--n", "6", "--w", "2", "--h", "1.0",
                     "--gamma", "5", "--n-mc", "3", "--output", str(path)])
        assert code == 0
        document = json.loads(path.read_text())
        assert document["arl_estimate"] >= 5.0
        assert document["n_mc"] == 3
        assert document["horizon"] == 50
        assert len(document["seeds"]["replicates"]) == 3


class TestCurves:
    def test_summary_line(self, tmp_path, capsys):
        path = tmp_path / "curves.csv"
        assert main(["curves", "--n", "60", "--seed", "2", "--output", str(path)]) == 0
        document = _json_output(capsys)
        assert document["rows"] == 512
        assert path.exists()

    def test_bandwidth_count(self):
        assert main(["curves", "--n", "60", "--bandwidths", "0.1,0.02"]) == EXIT_DOMAIN_ERROR


class TestExperiment:
    def test_small_study_with_ledger(self, tmp_path, capsys):
        config = {
            "name": "cli",
            "scenario": {"id": 1, "T": 30, "n": 6, "delta": 15},
            "d_list": [2],
            "h_list": [1.0],
            "gamma_list": [5.0],
            "w": 2,
            "reps": 2,
            "n_mc": 3,
        }
        config_path = tmp_path / "cli.json"
        config_path.write_text(json.dumps(config))
        code = main(["experiment", "--config", str(config_path), "--output-dir", str(tmp_path / "out"),
                     "--db", str(tmp_path / "results.db")])
        assert code == 0
        assert "gamma=5 one-k" in capsys.readouterr().out
        assert (tmp_path / "out" / "cli_summary.csv").exists()
        assert (tmp_path / "results.db").exists()


class TestSettings:
    def test_missing_settings_file(self, tmp_path):
        code = main(["--settings", str(tmp_path / "absent.json"), "advise", "--sigma", "1", "--n", "1", "--d", "1",
                     "--w", "1", "--gamma", "20", "--gamma-alpha", "2"])
        assert code == EXIT_DOMAIN_ERROR
