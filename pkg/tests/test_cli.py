import io
import subprocess
import sys

import numpy as np
import pytest

from sbp_sat_lab.cli import (EXIT_FAILED, EXIT_OK, EXIT_USAGE, THREADS_ENV, UsageError, build_parser,
                             config_from_args, main, read_config_file, thread_count)
from sbp_sat_lab.operators import build_csbp_narrow_d2, dumps_operator


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def config(*argv):
    return config_from_args(build_parser().parse_args(list(argv)))


# --- verify

def test_verify_builtin_operator_passes():
    code, out, _ = run("verify", "--family", "csbp", "--degree", "2", "--nodes", "20", "--stencil", "narrow")
    assert code == EXIT_OK
    assert "verified: true" in out
    assert "H_spd" in out and "decomposition" in out


def test_verify_load_non_spd_norm_fails(in_tmp):
    lines = dumps_operator(build_csbp_narrow_d2(2, 20)).split("\n")
    row = lines.index("H") + 1
    entries = lines[row].split()
    entries[0] = "-" + entries[0]
    lines[row] = " ".join(entries)
    (in_tmp / "bad_op.txt").write_text("\n".join(lines))
    code, out, _ = run("verify", "--load", "bad_op.txt")
    assert code == EXIT_FAILED
    assert "d1.H_spd" in out.split("failed:")[1]


def test_verify_unsupported_degree_is_usage_error():
    code, _, err = run("verify", "--family", "csbp", "--degree", "7", "--stencil", "narrow")
    assert code == EXIT_USAGE
    assert "degree" in err


def test_verify_unreadable_operator_file():
    code, _, err = run("verify", "--load", "missing.txt")
    assert code == EXIT_USAGE and "missing.txt" in err


# --- stability

def test_stability_br2_is_adjoint_consistent():
    code, out, _ = run("stability", "--sat", "br2", "--family", "csbp", "--degree", "3", "--stencil", "narrow")
    assert code == EXIT_OK
    assert "adjoint_consistent: true" in out and "stable: true" in out


def test_stability_bo_is_conservative_only():
    code, out, _ = run("stability", "--sat", "bo", "--family", "csbp", "--degree", "3")
    assert code == EXIT_OK
    assert "adjoint_consistent: false" in out and "conservative: true" in out


def test_stability_zero_dirichlet_penalty_fails(in_tmp):
    (in_tmp / "zeroTD.txt").write_text(
        "sat custom T1_k=1000 T1_v=1000 T2_k=-0.5 T2_v=-0.5 T3_k=0.5 T3_v=0.5 TD=0\n")
    code, out, _ = run("stability", "--sat", "custom", "--coeffs", "zeroTD.txt", "--degree", "3")
    assert code == EXIT_FAILED
    assert "interface_block: psd" in out
    assert "dirichlet_block: NOT psd" in out
    margin = next(line for line in out.splitlines() if line.startswith("margin TD:"))
    assert float(margin.split(":")[1]) < 0


def test_stability_custom_needs_coeffs():
    assert run("stability", "--sat", "custom")[0] == EXIT_USAGE


# --- solve

def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip()
    return header, np.loadtxt(path, delimiter=",", skiprows=1)


def test_solve_cos30_functional_error(in_tmp):
    code, out, _ = run("solve", "--family", "csbp", "--degree", "2", "--elements", "64", "--sat", "br2")
    assert code == EXIT_OK
    error = float(next(l for l in out.splitlines() if l.startswith("functional_error:")).split(":")[1])
    assert error < 1e-5
    header, data = read_csv(in_tmp / "solution.csv")
    assert header == "x,u_h,u_exact,error"
    assert data.shape == (64 * 20, 4)
    assert np.allclose(data[:, 3], data[:, 1] - data[:, 2], atol=1e-15)


def test_solve_linear_case_is_exact(in_tmp):
    code, out, _ = run("solve", "--case", "linear", "--elements", "3", "--output", "lin/u.csv")
    assert code == EXIT_OK
    _, data = read_csv(in_tmp / "lin" / "u.csv")
    assert np.max(np.abs(data[:, 3])) <= 1e-9


def test_solve_with_dirichlet_right_end(in_tmp):
    code, out, _ = run("solve", "--bc-right", "dirichlet", "--elements", "16")
    assert code == EXIT_OK
    assert "functional_error" not in out
    _, data = read_csv(in_tmp / "solution.csv")
    assert np.max(np.abs(data[:, 3])) < 1e-4


def test_solve_without_dirichlet_condition_is_usage_error():
    code, _, err = run("solve", "--bc-left", "neumann", "--bc-right", "neumann")
    assert code == EXIT_USAGE
    assert "dirichlet" in err.lower()


def test_solve_rejects_grid_of_cells():
    assert run("solve", "--degree", "2,3")[0] == EXIT_USAGE


# --- converge

def test_converge_assert_rates_br2_narrow_p2(in_tmp):
    code, out, _ = run("converge", "--family", "csbp", "--degree", "2", "--sat", "br2", "--assert-rates")
    assert code == EXIT_OK
    assert out.count("PASS") == 2 and "FAIL" not in out
    files = sorted(p.name for p in (in_tmp / "convergence").iterdir())
    assert files == ["csbp_narrow_p2_br2.csv", "csbp_narrow_p2_br2_functional_error.dat",
                     "csbp_narrow_p2_br2_solution_error.dat"]


def test_converge_failed_assertion_exits_one():
    code, out, _ = run("converge", "--degree", "3", "--elements", "2,4,8", "--assert-rates",
                       "--precision", "double")
    assert code == EXIT_FAILED
    assert "FAIL" in out


def test_converge_empty_element_list_is_usage_error():
    assert run("converge", "--elements", "")[0] == EXIT_USAGE
    assert run("converge", "--elements", ",")[0] == EXIT_USAGE


def test_converge_without_reference_skips_assertion():
    code, out, _ = run("converge", "--stencil", "wide", "--sat", "bo", "--elements", "4,8,16", "--assert-rates")
    assert code == EXIT_OK and "assertion skipped" in out


def dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_converge_output_is_deterministic(in_tmp, monkeypatch):
    argv = ["converge", "--family", "csbp,lgl", "--degree", "1,2", "--sat", "br2,bo", "--elements", "4,8,16"]
    monkeypatch.setenv(THREADS_ENV, "1")
    first = run(*argv, "--output", "a")
    monkeypatch.setenv(THREADS_ENV, "4")
    second = run(*argv, "--output", "b")
    third = run(*argv, "--output", "c")
    assert first[0] == second[0] == third[0] == EXIT_OK
    assert first[1].replace("wrote: a", "") == second[1].replace("wrote: b", "")
    assert dir_bytes(in_tmp / "a") == dir_bytes(in_tmp / "b") == dir_bytes(in_tmp / "c")
    assert len(dir_bytes(in_tmp / "a")) == 8 * 3


# --- configuration

def test_config_precedence(in_tmp):
    (in_tmp / "run.cfg").write_text("# sweep settings\ndegree = 3\nsat=ldg\nrate-tol=0.5  # loose\n")
    cfg = config("converge", "--config", "run.cfg", "--degree", "4")
    assert cfg.degrees == (4,)
    assert cfg.sats == ("ldg",)
    assert cfg.rate_tol == 0.5
    assert cfg.window == 3


@pytest.mark.parametrize("text", ["degree\n", "colour=red\n", "degree=two\n"])
def test_config_file_errors(in_tmp, text):
    (in_tmp / "bad.cfg").write_text(text)
    with pytest.raises(UsageError):
        read_config_file(in_tmp / "bad.cfg")
    assert run("verify", "--config", "bad.cfg")[0] == EXIT_USAGE


def test_load_implies_load_family():
    assert config("verify", "--load", "x.txt").families == ("load",)


@pytest.mark.parametrize("argv", [
    ["verify", "--family", "lgl", "--stencil", "narrow"],
    ["verify", "--alpha", "0"],
    ["verify", "--degree", "0"],
    ["converge", "--window", "1"],
    ["verify", "--pinv-tol", "2"],
    ["verify", "--family", "load"],
    ["verify", "--sat", "upwind"],
])
def test_inconsistent_configs_are_rejected(argv):
    with pytest.raises(UsageError):
        config(*argv)
    assert run(*argv)[0] == EXIT_USAGE


def test_unknown_subcommand_and_flag():
    assert run("plot")[0] == EXIT_USAGE
    assert run("verify", "--colour")[0] == EXIT_USAGE


def test_thread_count():
    assert thread_count({THREADS_ENV: "3"}) == 3
    assert thread_count({}) >= 1
    for raw in ("0", "many"):
        with pytest.raises(UsageError):
            thread_count({THREADS_ENV: raw})


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sbp_sat_lab", "verify", "--degree", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "verified: true" in proc.stdout
