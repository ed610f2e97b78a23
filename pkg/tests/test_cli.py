import pytest

from afem_pbe import cli, experiments
from afem_pbe.solver import SolverError


def resolved(argv):
    return cli.resolve(cli.build_parser().parse_args(["run", *argv]))


def test_precedence_defaults_config_flags(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# sample\nproblem = pbe-jump\ntheta = 0.3\nmax-vertices = 5000  # inline\ndump_meshes = yes\n")
    opts = resolved(["--config", str(cfg)])
    assert opts["problem"] == "pbe-jump" and opts["theta"] == 0.3 and opts["max_vertices"] == 5000
    assert opts["dump_meshes"] is True and opts["mode"] == "both"
    opts = resolved(["--config", str(cfg), "--theta", "0.7", "--problem", "corner"])
    assert opts["theta"] == 0.7 and opts["problem"] == "corner" and opts["max_vertices"] == 5000
    assert resolved(["--problem", "pbe"])["theta"] == cli.DEFAULTS["theta"]
    assert resolved(["--problem", "pbe", "--diagnostics", "quasi, approx"])["diagnostics"] == {"quasi", "approx"}


@pytest.mark.parametrize(
    "text",
    ["problem = pbe\nbogus = 1\n", "problem = pbe\ntheta = 1.5\n", "theta = 0.5\n", "problem = pbe\nno equals sign\n",
     "problem = pbe\nmax_vertices = many\n", "problem = nope\n", "problem = pbe\ndiagnostics = linf,zzz\n"],
)
def test_bad_config_exits_4(tmp_path, text, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "invalid config" in capsys.readouterr().err


def test_missing_config_file_exits_4(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "none.cfg")]) == cli.EXIT_CONFIG


def test_solver_failure_exits_2(monkeypatch, tmp_path):
    def boom(*args, **kwargs):
        raise SolverError("no convergence")

    monkeypatch.setattr(experiments, "run", boom)
    assert cli.main(["run", "--problem", "pbe", "--out", str(tmp_path)]) == cli.EXIT_SOLVER


def test_reference_budget_exits_3(tmp_path, capsys):
    argv = ["run", "--problem", "pbe", "--mode", "exact", "--max-vertices", "100",
            "--reference-multiplier", "1e5", "--out", str(tmp_path)]
    assert cli.main(argv) == cli.EXIT_BUDGET
    assert "budget" in capsys.readouterr().err


def test_small_run(tmp_path, capsys):
    argv = ["run", "--problem", "corner", "--mode", "inexact", "--max-vertices", "300",
            "--diagnostics", "linf,quasi", "--seed", "7", "--out", str(tmp_path)]
    assert cli.main(argv) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("corner inexact:") and "slope=n/a" in out
    assert (tmp_path / "corner_inexact.csv").exists()
    assert f"wrote {tmp_path / 'corner_inexact.csv'}" in out


def test_help_lists_run(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0 and "run" in capsys.readouterr().out
