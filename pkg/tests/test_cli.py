import csv
import json

import numpy as np
import pytest

from hidim.cli import _effective_config, build_parser, load_config, main, read_table


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["bench", "ishigami", "--n", "60", "--seed", "1", "--out", str(root / "bench")]) == 0
    sample = root / "bench" / "sample.csv"
    assert main(["screen", str(sample), "--out", str(root / "screen")]) == 0
    assert main(["fit", str(sample), "--screening", str(root / "screen" / "screening.csv"),
                 "--starts", "2", "--max-evals", "200", "--out", str(root / "fit")]) == 0
    return root


class TestDesign:
    def test_default_size_is_ten_per_input(self, tmp_path, capsys):
        assert main(["design", "--d", "27", "--budget", "0", "--out", str(tmp_path)]) == 0
        assert len(rows(tmp_path / "design.csv")) == 271
        assert "maximin" in capsys.readouterr().out

    def test_repeatable_bytes(self, tmp_path):
        for sub in ("a", "b"):
            main(["design", "--d", "3", "--n", "12", "--seed", "4", "--out", str(tmp_path / sub)])
        assert (tmp_path / "a" / "design.csv").read_bytes() == (tmp_path / "b" / "design.csv").read_bytes()

    def test_single_run_rejected(self, tmp_path):
        assert main(["design", "--d", "2", "--n", "1", "--out", str(tmp_path)]) == 1

    def test_config_inputs_and_manifest(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[inputs]\nP = 1, 3\nT = -5, 5\n\n[design]\nn = 8\nseed = 2\n")
        assert main(["design", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        header, values = read_table(tmp_path / "o" / "design.csv")
        assert header == ["P", "T"] and values.shape == (8, 2)
        assert np.all((values[:, 0] >= 1) & (values[:, 0] <= 3))
        manifest = json.loads((tmp_path / "o" / "manifest_design.json").read_text())
        assert sorted(manifest["artifacts"]) == ["design.csv", "design_unit.csv"]
        assert manifest["seeds"]["seed"] == 2

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[screening]\nalpha = 0.05\n")
        args = build_parser().parse_args(["screen", "s.csv", "--config", str(cfg), "--alpha", "0.2",
                                          "--out", "x"])
        assert load_config(cfg).alpha == 0.05
        assert _effective_config(args).alpha == 0.2


class TestBench:
    def test_g27_columns(self, tmp_path):
        assert main(["bench", "g27", "--n", "270", "--budget", "0", "--out", str(tmp_path)]) == 0
        table = rows(tmp_path / "sample.csv")
        assert len(table[0]) == 28 and len(table) == 271

    def test_ishigami_columns(self, pipeline):
        assert len(rows(pipeline / "bench" / "sample.csv")[0]) == 4

    def test_unknown_name(self, tmp_path, capsys):
        assert main(["bench", "nope", "--out", str(tmp_path)]) == 1
        assert "ishigami" in capsys.readouterr().err


class TestScreen:
    def test_report_files(self, pipeline):
        table = rows(pipeline / "screen" / "screening.csv")
        assert table[0] == ["input", "hsic", "r2_hsic", "p_value", "selected"]
        assert (pipeline / "screen" / "screening_summary.txt").exists()

    def test_zero_output(self, tmp_path, capsys):
        path = tmp_path / "zero.csv"
        path.write_text("x1,x2,y\n0.1,0.2,0\n0.5,0.9,0\n0.7,0.3,0\n")
        assert main(["screen", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "constant" in capsys.readouterr().err

    def test_alpha_out_of_range(self, pipeline, tmp_path):
        sample = str(pipeline / "bench" / "sample.csv")
        assert main(["screen", sample, "--alpha", "1.5", "--out", str(tmp_path)]) == 1

    def test_malformed_csv(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("x1,y\n0.1,1\n0.2,oops\n")
        assert main(["screen", str(path), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "line 3" in err and "column 2" in err


class TestFit:
    def test_trajectory_rows(self, pipeline):
        table = rows(pipeline / "fit" / "trajectory.csv")
        selected = [r for r in rows(pipeline / "screen" / "screening.csv")[1:] if r[4] == "1"]
        assert len(table) - 1 == len(selected)
        assert all(r[2] != "" for r in table[1:])

    def test_loo_validation(self, pipeline, tmp_path):
        sample = str(pipeline / "bench" / "sample.csv")
        assert main(["fit", sample, "--screening", str(pipeline / "screen" / "screening.csv"),
                     "--validation", "loo", "--starts", "1", "--max-evals", "100",
                     "--out", str(tmp_path)]) == 0
        table = rows(tmp_path / "trajectory.csv")
        assert all(r[2] == "" and r[3] != "" for r in table[1:])

    def test_missing_screening_file(self, pipeline, tmp_path):
        sample = str(pipeline / "bench" / "sample.csv")
        assert main(["fit", sample, "--screening", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2


class TestPredict:
    def test_training_points(self, pipeline, tmp_path):
        sample = pipeline / "bench" / "sample.csv"
        with pytest.warns(UserWarning, match="ignoring"):
            assert main(["predict", str(pipeline / "fit" / "model"), str(sample), "--out", str(tmp_path)]) == 0
        _, data = read_table(sample)
        header, pred = read_table(tmp_path / "predictions.csv")
        assert header == ["mean", "total_variance"] and pred.shape[0] == data.shape[0]
        assert np.all(pred[:, 1] >= 0)

    def test_empty_query(self, pipeline, tmp_path):
        query = tmp_path / "empty.csv"
        query.write_text("")
        assert main(["predict", str(pipeline / "fit" / "model"), str(query), "--out", str(tmp_path / "o")]) == 0
        assert rows(tmp_path / "o" / "predictions.csv") == [["mean", "total_variance"]]

    def test_missing_column(self, pipeline, tmp_path, capsys):
        query = tmp_path / "q.csv"
        query.write_text("x1,x2\n0.1,0.2\n")
        assert main(["predict", str(pipeline / "fit" / "model"), str(query), "--out", str(tmp_path / "o")]) == 2
        assert "x3" in capsys.readouterr().err


def test_report(pipeline, capsys):
    assert main(["report", str(pipeline / "fit")]) == 0
    assert "Q2" in capsys.readouterr().out
    assert main(["report", str(pipeline / "screen")]) == 0


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as info:
        main(["design", "--bogus"])
    assert info.value.code == 1
