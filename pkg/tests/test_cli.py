import csv
import json

import numpy as np
import pytest

from robust_palmrt.cli import main, read_table
from robust_palmrt.simulation import synthetic_case_control


def write_table(path, cols: dict):
    names = list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(cols[k] for k in names)):
            w.writerow([repr(float(v)) for v in row])
    return str(path)


@pytest.fixture
def lc_file(tmp_path):
    return write_table(tmp_path / "lc.csv", synthetic_case_control(seed=5, dispersion=2.0))


def run_json(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 and out.strip() else None)


class TestReadTable:
    def test_roles_and_intercept(self, lc_file):
        t = read_table(lc_file)
        assert t.x_columns == ["x_LC"] and len(t.z_columns) == 5
        assert t.intercept_added and t.data.z.shape == (176, 6)
        assert len(t.sha256) == 64

    def test_constant_column_suppresses_intercept(self, tmp_path):
        p = write_table(tmp_path / "c.csv", {"y": [1, 2, 3, 5], "x1": [0, 1, 0, 1], "z0": [1, 1, 1, 1]})
        t = read_table(p)
        assert not t.intercept_added and t.data.z.shape == (4, 1)


class TestTestCommand:
    def test_synthetic_schema_report(self, lc_file, capsys):
        argv = ["test", "--input", lc_file, "-B", "99", "--seed", "4"]
        code, doc = run_json(capsys, argv)
        assert code == 0
        rep = doc["report"]
        assert 0 < rep["p_value"] <= 1 and rep["B"] == 99 and rep["seed"] == 4
        assert "2*alpha" in rep["alpha_note"]
        assert doc["config"]["x_columns"] == ["x_LC"]
        _, again = run_json(capsys, argv)
        assert again == doc

    def test_y_in_span_of_z(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        z1, z2 = rng.standard_normal(20), rng.standard_normal(20)
        p = write_table(tmp_path / "s.csv", {"y": 2 * z1 - z2 + 1, "x1": rng.standard_normal(20), "z1": z1, "z2": z2})
        code, doc = run_json(capsys, ["test", "--input", p, "-B", "49", "--fitter", "OLS", "--evaluator", "L2"])
        assert code == 0 and doc["report"]["p_value"] == 1.0

    def test_missing_y(self, tmp_path, capsys):
        p = write_table(tmp_path / "m.csv", {"x1": [1, 2, 3], "z1": [0, 1, 0]})
        assert main(["test", "--input", p]) == 2
        assert "'y'" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "content",
        ["y,x1,w\n1,2,3\n2,3,4\n", "y,z1\n1,2\n2,3\n", "y,x1\n1,a\n2,3\n", "y,x1\n1,2,3\n2,3\n", ""],
    )
    def test_malformed_input(self, tmp_path, capsys, content):
        p = tmp_path / "bad.csv"
        p.write_text(content)
        assert main(["test", "--input", str(p)]) == 2

    def test_unknown_flag(self, lc_file):
        with pytest.raises(SystemExit) as exc:
            main(["test", "--input", lc_file, "--permutations", "5"])
        assert exc.value.code == 2

    def test_csv_output(self, lc_file, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["test", "--input", lc_file, "-B", "19", "--format", "csv", "--output", str(out)]) == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 1 and "report.p_value" in rows[0]


class TestOtherCommands:
    def test_dispersion(self, lc_file, capsys):
        code, doc = run_json(capsys, ["dispersion", "--input", lc_file, "-B", "19", "--seed", "2"])
        assert code == 0 and 0 < doc["report"]["p_value"] <= 1

    def test_dispersion_needs_indicator(self, tmp_path):
        p = write_table(tmp_path / "d.csv", {"y": [1, 2, 3, 4], "x1": [0.5, 1, 0, 1]})
        assert main(["dispersion", "--input", p, "-B", "5"]) == 2

    def test_ci(self, lc_file, capsys):
        code, doc = run_json(capsys, ["ci", "--input", lc_file, "-B", "19", "--grid=-1:1:5"])
        assert code == 0 and "beta_lo" in doc["interval"]
        assert main(["ci", "--input", lc_file, "-B", "19"]) == 2

    def test_calibrate(self, capsys):
        code, doc = run_json(capsys, ["calibrate", "--target", "0.5", "--reps", "1000"])
        assert code == 0

    def test_check(self, capsys):
        code = main(["check", "--instances", "5", "--lemma-instances", "200"])
        out = capsys.readouterr().out
        assert code == 0
        assert all(line.startswith("PASS") for line in out.strip().splitlines())


class TestSimulate:
    def manifest(self, tmp_path, **setting):
        base = {"design": "Normal", "error": "T3", "n": 30, "p": 3, "beta": 0.5, "trials": 3, "B": 9, "seed0": 10}
        doc = {"study": "power", "methods": ["F-test", "OLS-L2"], "alphas": [0.05], "settings": [base | setting]}
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_rerun_byte_identical(self, tmp_path):
        m = self.manifest(tmp_path)
        assert main(["simulate", "-m", m, "--out", str(tmp_path / "a"), "--quiet"]) == 0
        assert main(["simulate", "-m", m, "--out", str(tmp_path / "b"), "--quiet"]) == 0
        for name in ("aggregate.csv", "trials.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        seeds = json.loads((tmp_path / "a" / "manifest.json").read_text())["settings"][0]["seeds"]
        assert seeds == [10, 12]

    def test_zero_trials(self, tmp_path):
        assert main(["simulate", "-m", self.manifest(tmp_path, trials=0), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_setting_key(self, tmp_path):
        assert main(["simulate", "-m", self.manifest(tmp_path, colour="red"), "--out", str(tmp_path / "o")]) == 2
