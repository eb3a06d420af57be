"""Command-line front-end tests."""
import csv
import subprocess
import sys

import pytest

from thbdefeat.cli import (EXIT_BUDGET, EXIT_ERROR, EXIT_OK, main,
                           preset_path)

TINY = """
[geometry.south]
curve = "segment"
p0 = [0.0, 0.0]
p1 = [1.0, 0.0]
[geometry.east]
curve = "segment"
p0 = [1.0, 0.0]
p1 = [1.0, 1.0]
[geometry.north]
curve = "sine_segment"
p0 = [0.0, 1.0]
p1 = [1.0, 1.0]
amplitude = -0.08
frequency = 3.0
[geometry.west]
curve = "segment"
p0 = [0.0, 0.0]
p1 = [0.0, 1.0]
[bc]
neumann = ["west"]
[data]
f = "zero"
g = "one"
[qoi]
q = "square"
q_side = "west"
[run]
epsilon = 1e-7
alpha = 0.5
initial_cells = 4
degree = 3
state_depth = 1
max_iters = 2
[reference]
rounds = 1
sides = ["north"]
"""


@pytest.fixture()
def tiny_problem(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return str(path)


class TestValidate:
    def test_preset_validates(self, capsys):
        assert main(["validate", "flag"]) == EXIT_OK
        assert "ok:" in capsys.readouterr().out

    def test_unknown_preset_fails(self, capsys):
        assert main(["validate", "no-such-preset"]) == EXIT_ERROR
        assert "error:" in capsys.readouterr().err

    def test_invalid_file_fails(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[geometry.south]\ncurve = 'segment'\n")
        assert main(["validate", str(bad)]) == EXIT_ERROR

    def test_flag_preset_file_exists(self):
        assert preset_path("flag").endswith("flag.toml")


class TestDefeature:
    def test_epsilon_none_stops_after_first_iteration(self, tiny_problem,
                                                      tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["defeature", tiny_problem, "--epsilon", "none",
                     "--out", str(out)])
        assert code == EXIT_OK
        stdout = capsys.readouterr().out
        assert "iterations = 1" in stdout
        rows = list(csv.DictReader((out / "run_record.csv").open()))
        assert len(rows) == 1
        assert (out / "mesh_000.csv").exists()
        assert (out / "final_control_net.csv").exists()
        assert (out / "final_boundary.csv").exists()

    def test_budget_exhaustion_returns_2(self, tiny_problem, tmp_path):
        code = main(["defeature", tiny_problem, "--epsilon", "1e-30",
                     "--max-iters", "1", "--out",
                     str(tmp_path / "run2")])
        assert code == EXIT_BUDGET

    def test_rerun_is_byte_identical(self, tiny_problem, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["defeature", tiny_problem, "--epsilon", "none",
                         "--out", str(out)]) == EXIT_OK
            outs.append((out / "run_record.csv").read_bytes())
        assert outs[0] == outs[1]


class TestReference:
    def test_reference_writes_summary(self, tiny_problem, tmp_path,
                                      capsys):
        out = tmp_path / "ref"
        code = main(["reference", tiny_problem, "--rounds", "1",
                     "--field-samples", "9", "--out", str(out)])
        assert code == EXIT_OK
        stdout = capsys.readouterr().out
        assert "J_E = " in stdout
        rows = list(csv.DictReader((out / "reference_summary.csv").open()))
        assert float(rows[0]["J_E"]) > 0.0
        field = list(csv.DictReader((out / "reference_field.csv").open()))
        assert len(field) == 81

    def test_trivial_data_gives_zero_functional(self, tmp_path, capsys):
        path = tmp_path / "trivial.toml"
        path.write_text(TINY.replace('g = "one"', 'g = "zero"'))
        assert main(["reference", str(path), "--rounds", "0"]) == EXIT_OK
        out = capsys.readouterr().out
        j_e = float(out.splitlines()[0].split("=")[1])
        assert j_e == 0.0


def test_console_invocation_round_trips():
    proc = subprocess.run([sys.executable, "-m", "thbdefeat.cli",
                           "validate", "flag"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert "ok:" in proc.stdout
