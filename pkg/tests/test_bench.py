import csv
import io
import subprocess
import sys

import numpy as np
import pytest
import scipy.sparse as sp

from semilinear_fmg import __main__ as cli
from semilinear_fmg.assemble import error_norms
from semilinear_fmg.bench import (
    ADAPTIVE_COLUMNS,
    UNIFORM_COLUMNS,
    BenchConfig,
    ConfigError,
    OutputError,
    SolverError,
    UnknownProblemError,
    check_postconditions,
    emit_csv,
    read_config_file,
    run_adaptive,
    run_uniform,
)
from semilinear_fmg.fmg import build_hierarchy
from semilinear_fmg.problems import poisson_2d
from semilinear_fmg.sparse import mg_solve_m_steps


@pytest.fixture(scope="module")
def example1_rows():
    rows, _ = run_uniform(BenchConfig(problem="example1", levels=5))
    return rows


@pytest.mark.parametrize("field, value", [
    ("levels", 1), ("levels", 11), ("m", 0), ("m", 11), ("p", 0), ("p", 6),
    ("theta_mark", 0.0), ("theta_mark", 1.0), ("base", 0), ("coarse_index", 0),
    ("coarse_index", 6), ("iters", -1),
])
def test_config_ranges(field, value):
    with pytest.raises(ConfigError) as info:
        BenchConfig(**{field: value})
    assert info.value.exit_code == 2


def test_unknown_problem():
    with pytest.raises(UnknownProblemError) as info:
        BenchConfig(problem="example7")
    assert info.value.exit_code == 3 and info.value.category == "problem"


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# study\nproblem = example3\nlevels = 4  # short\ntheta-mark = 0.4\n\niterations = 3\n")
    values = read_config_file(path)
    assert values == {"problem": "example3", "levels": 4, "theta_mark": 0.4, "iters": 3}
    assert BenchConfig(**values).levels == 4


@pytest.mark.parametrize("text", ["levels 4\n", "colour = red\n", "levels = four\n", "adaptive = maybe\n"])
def test_config_file_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        read_config_file(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "absent.cfg")


def test_uniform_rates(example1_rows):
    assert [r["level"] for r in example1_rows] == [1, 2, 3, 4, 5]
    energy = np.array([r["energy_error"] for r in example1_rows])
    l2 = np.array([r["l2_error"] for r in example1_rows])
    e_ratio = energy[-2:] / energy[-3:-1]
    l_ratio = l2[-2:] / l2[-3:-1]
    assert np.all((0.4 <= e_ratio) & (e_ratio <= 0.65))
    assert np.all((0.2 <= l_ratio) & (l_ratio <= 0.35))
    assert all(r["nonlinear_iters"] <= 10 for r in example1_rows)


def test_oracle_reference_for_problem_without_exact_solution():
    rows, _ = run_uniform(BenchConfig(problem="example2", levels=4))
    energy = np.array([r["energy_error"] for r in rows])
    assert np.all(np.isfinite(energy)) and np.all(np.diff(energy) < 0)


def linear_fmg_table(problem, levels, base, m):
    """Independent linear full multigrid: V-cycles, then a dense Galerkin solve on V_H + span{u_tilde}."""
    h = build_hierarchy(problem, levels, base)
    u = np.linalg.solve(h.stiffness(1).toarray(), h.load(1))
    table = [(1, u.size) + error_norms(h.space(1), u, problem.exact, problem.exact_grad)]
    PH = sp.identity(h.n_dofs(1), format="csr")
    for k in range(2, levels + 1):
        PH = h.prolongations[k - 1] @ PH
        A, b = h.stiffness(k), h.load(k)
        u_tilde = mg_solve_m_steps(h.stack, k, b, h.prolongations[k - 1] @ u, m)
        E = sp.hstack([PH, sp.csr_matrix(u_tilde[:, None])]).toarray()
        c = np.linalg.solve(E.T @ (A @ E), E.T @ b)
        u = E @ c
        table.append((k, u.size) + error_norms(h.space(k), u, problem.exact, problem.exact_grad))
    return table


def test_linear_variant_matches_linear_fmg():
    rows, _ = run_uniform(BenchConfig(problem="poisson", levels=5))
    oracle = linear_fmg_table(poisson_2d(), 5, 4, 2)
    for row, (level, n, energy, l2) in zip(rows, oracle):
        assert (row["level"], row["N_k"]) == (level, n)
        assert abs(row["energy_error"] - energy) <= 1e-10 * energy
        assert abs(row["l2_error"] - l2) <= 1e-10 * l2


def test_adaptive_rows():
    assert run_adaptive(BenchConfig(problem="example4", adaptive=True, iters=0)) == ([], None)
    rows, run = run_adaptive(BenchConfig(problem="example4", adaptive=True, iters=4, base=2))
    assert [r["iter"] for r in rows] == [1, 2, 3, 4]
    assert all(r["eta_total"] > 0 and np.isfinite(r["eta_total"]) for r in rows)
    assert len(run.iterations) == 4


def test_run_uniform_rejects_adaptive_config():
    with pytest.raises(ConfigError):
        run_uniform(BenchConfig(adaptive=True))


def test_solver_failure_is_categorised():
    # an L-shaped base with a non power of two resolution is a configuration problem
    with pytest.raises(ConfigError):
        run_adaptive(BenchConfig(problem="example4", adaptive=True, iters=2, base=3))
    assert SolverError.exit_code == 4


def test_postconditions(example1_rows):
    cfg = BenchConfig(problem="example1", levels=5)
    assert check_postconditions(cfg, example1_rows) == []
    bad = [dict(r) for r in example1_rows]
    bad[2]["energy_error"] = float("nan")
    bad[3]["l2_error"] = -1.0
    bad[4]["N_k"] = bad[3]["N_k"]
    issues = check_postconditions(cfg, bad)
    assert len(issues) == 3
    assert any("not finite" in s for s in issues)
    assert any("negative" in s for s in issues)
    assert any("not increasing" in s for s in issues)


def test_postcondition_verdicts_depend_only_on_seed(example1_rows):
    for seed in (0, 5):
        cfg = BenchConfig(problem="example3", levels=5, seed=seed)
        assert check_postconditions(cfg, example1_rows) == check_postconditions(cfg, example1_rows)


def test_csv_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    emit_csv([], path, ADAPTIVE_COLUMNS)
    assert path.read_bytes() == b"iter,N,eta_total,time_s\n"
    with pytest.raises(ValueError):
        emit_csv([], path)


def test_csv_round_trip_and_format(tmp_path, example1_rows):
    path = tmp_path / "table.csv"
    text = emit_csv(example1_rows, path, UNIFORM_COLUMNS)
    assert path.read_text(encoding="utf-8") == text
    assert text.endswith("\n")
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0]) == list(UNIFORM_COLUMNS)
    for row, back in zip(example1_rows, parsed):
        assert int(back["level"]) == row["level"]
        assert int(back["N_k"]) == row["N_k"]
        assert float(back["energy_error"]) == row["energy_error"]
        assert float(back["l2_error"]) == row["l2_error"]
        assert back["level_time_s"] == "%.3f" % row["level_time_s"]


def test_csv_bytes_are_deterministic(tmp_path):
    rows = [{"a": 1, "b": 0.1, "time_s": 0.0123456}, {"a": 2, "b": 1 / 3, "time_s": 2.0}]
    first = emit_csv(rows, tmp_path / "1.csv")
    second = emit_csv([dict(r) for r in rows], tmp_path / "2.csv")
    assert first == second == "a,b,time_s\n1,0.10000000000000001,0.012\n2,0.33333333333333331,2.000\n"


def test_csv_to_stdout(capsys):
    emit_csv([{"x": 1.5}], "-")
    assert capsys.readouterr().out == "x\n1.5\n"


def test_csv_io_error_names_the_path(tmp_path):
    target = tmp_path / "missing" / "out.csv"
    with pytest.raises(OutputError, match="missing"):
        emit_csv([{"x": 1}], target)


def test_cli_run(tmp_path, capsys):
    out = tmp_path / "run.csv"
    code = cli.main(["--seed", "3", "run", "--problem", "example1", "--levels", "3", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(UNIFORM_COLUMNS)
    assert len(lines) == 4


def test_cli_adaptive_zero_iterations(capsys):
    assert cli.main(["adaptive", "--iters", "0"]) == 0
    assert capsys.readouterr().out == ",".join(ADAPTIVE_COLUMNS) + "\n"


def test_cli_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("problem = example3\nlevels = 5\n")
    out = tmp_path / "o.csv"
    assert cli.main(["run", "--config", str(cfg), "--levels", "2", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


@pytest.mark.parametrize("argv, code, category", [
    (["run", "--levels", "11"], 2, "config"),
    (["run", "--m", "0"], 2, "config"),
    (["adaptive", "--theta-mark", "1.5"], 2, "config"),
])
def test_cli_config_errors(argv, code, category, capsys):
    assert cli.main(argv) == code
    assert capsys.readouterr().err.startswith(f"error[{category}]:")


def test_cli_unknown_problem_from_config(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("problem = example9\n")
    assert cli.main(["run", "--config", str(cfg)]) == 3
    assert "error[problem]" in capsys.readouterr().err


def test_cli_unwritable_output(tmp_path, capsys):
    assert cli.main(["run", "--levels", "2", "--out", str(tmp_path / "no" / "x.csv")]) == 6
    assert "error[io]" in capsys.readouterr().err


def test_cli_solver_and_postcondition_failures(monkeypatch, capsys):
    def failing(cfg):
        raise SolverError("no convergence")

    monkeypatch.setattr(cli, "run_uniform", failing)
    assert cli.main(["run", "--levels", "2"]) == 4
    assert "error[solver]" in capsys.readouterr().err
    monkeypatch.undo()
    monkeypatch.setattr(cli, "check_postconditions", lambda cfg, rows: ["dof counts are not increasing"])
    assert cli.main(["run", "--levels", "2"]) == 5
    assert "error[postcondition]" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = tmp_path / "a.csv"
    proc = subprocess.run([sys.executable, "-m", "semilinear_fmg", "adaptive", "--iters", "2", "--base", "1",
                           "--out", str(out)], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert len(out.read_text().splitlines()) == 3
