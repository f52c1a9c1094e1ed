import csv
import json

import numpy as np
import pytest

from jellium2d.cli import main


def run_cli(args):
    return main(args)


class TestMinimize:
    def test_two_point_minimizer(self, tmp_path, capsys):
        out = tmp_path / "config.json"
        code = run_cli(["minimize", "--n", "2", "--potential", "power:2",
                        "--restarts", "2", "--seed", "1",
                        "--out", str(out)])
        assert code == 0
        data = json.loads(out.read_text())
        pts = np.asarray(data["points"])
        assert np.linalg.norm(pts[0] - pts[1]) == pytest.approx(1.0, abs=1e-6)
        assert data["best_energy"] == pytest.approx(1.0, abs=1e-8)
        assert data["version"]
        assert data["config"]["command"] == "minimize"

    def test_byte_identical_given_seed(self, tmp_path):
        out = tmp_path / "config.json"
        outs = []
        for _ in range(2):
            run_cli(["minimize", "--n", "5", "--restarts", "2",
                     "--seed", "7", "--out", str(out)])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_stdout_when_no_out(self, capsys):
        code = run_cli(["minimize", "--n", "1", "--restarts", "1",
                        "--seed", "0"])
        assert code == 0
        data = json.loads(capsys.readouterr().out)
        assert data["best_energy"] == pytest.approx(0.0, abs=1e-10)


class TestPolish:
    def test_polish_from_saved_config(self, tmp_path):
        cfg = tmp_path / "start.json"
        cfg.write_text(json.dumps(
            {"points": [[0.501, 0.001], [-0.499, 0.0]]}))
        out = tmp_path / "polished.json"
        code = run_cli(["polish", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        pts = np.asarray(json.loads(out.read_text())["points"])
        assert np.linalg.norm(pts[0] - pts[1]) == pytest.approx(1.0, abs=1e-6)


class TestTorusEnergy:
    def test_triangular_beats_square(self, tmp_path):
        vals = {}
        for lat in ("triangular", "square"):
            out = tmp_path / f"{lat}.json"
            code = run_cli(["torus-energy", "--lattice", lat,
                            "--density", "1", "--out", str(out)])
            assert code == 0
            vals[lat] = json.loads(out.read_text())["value"]
        assert vals["triangular"] < vals["square"]

    def test_unknown_lattice_exits(self):
        with pytest.raises(SystemExit):
            run_cli(["torus-energy", "--lattice", "hexagonal"])


class TestAnalyze:
    def test_reports_and_csv(self, tmp_path):
        cfg = tmp_path / "config.json"
        run_cli(["minimize", "--n", "60", "--restarts", "1", "--seed", "3",
                 "--out", str(cfg)])
        out = tmp_path / "report.json"
        csv_path = tmp_path / "report.csv"
        code = run_cli(["analyze", "--config", str(cfg),
                        "--report", "discrepancy,separation",
                        "--ell", "2,3", "--csv", str(csv_path),
                        "--out", str(out)])
        assert code == 0
        data = json.loads(out.read_text())
        assert "discrepancy" in data and "separation" in data
        assert data["separation"]["min_pairwise"] > 0
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "report"
        kinds = {r[0] for r in rows[1:]}
        assert {"discrepancy", "separation"} <= kinds


class TestWindowedW:
    def test_single_charge_window(self, tmp_path):
        cfg = tmp_path / "one.json"
        cfg.write_text(json.dumps({"points": [[0.0, 0.0]]}))
        out = tmp_path / "w.json"
        code = run_cli(["windowed-w", "--config", str(cfg),
                        "--center", "0,0", "--half-width", "3",
                        "--out", str(out)])
        assert code == 0
        data = json.loads(out.read_text())
        assert data["n_charges"] == 1
        assert np.isfinite(data["value"])


class TestScreen:
    def test_patch_record(self, tmp_path):
        out = tmp_path / "patch.json"
        code = run_cli(["screen", "--inner", "2",
                        "--density", f"uniform:{1.0 / np.pi}",
                        "--scale", "1.5",
                        "--out", str(out)])
        assert code == 0
        data = json.loads(out.read_text())
        assert data["n_points"] == len(data["points"])
        # pair-coupled cells are integer only when combined
        charges = list(data["charges"])
        for ia, ib in data["pairs"]:
            charges[ia] += charges[ib]
            charges[ib] = 0.0
        for q in charges:
            assert abs(q - round(q)) < 1e-9
        assert abs(data["outer_flux"]) <= 1e-8
        assert data["max_interface_jump"] <= 1e-8
        f = data["fields"][0]
        assert len(f["Ex"]) == f["shape"][0] * f["shape"][1]

    def test_bad_density_spec(self):
        with pytest.raises(SystemExit):
            run_cli(["screen", "--inner", "2", "--density", "gauss:1"])


class TestErrors:
    def test_missing_config_file_is_error_record(self, tmp_path, capsys):
        code = run_cli(["polish", "--config", str(tmp_path / "nope.json")])
        assert code == 1
        err = capsys.readouterr().err
        record = json.loads(err.strip().splitlines()[-1])
        assert record["error"]["type"] == "FileNotFoundError"
