"""Command-line front end: ``verify``, ``stability``, ``solve`` and ``converge``.

Settings come from flags, then an optional ``--config`` file of ``key=value``
lines, then built-in defaults. Exit status is 0 on success, 1 when a check,
stability certificate or rate assertion fails and 2 for usage, construction,
parse or solver errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence, TextIO

import numpy as np

from .assembly import assemble_primal, discrete_functional, solve_system, uniform_mesh
from .errors import InvalidInputError, SbpSatError
from .numerics import PINV_REL_TOL, PSD_TOL
from .operators import (SecondDerivOp, build_second_deriv, parse_operator, verify_first_deriv,
                        verify_second_deriv)
from .sats import (DEFAULT_ALPHA, SatFamily, check_adjoint_consistency, check_conservation,
                   check_stability, load_custom_coeffs, operator_symmetry_flags)
from .study import (CASES, ConvergenceTable, default_stencil, rate_of, reference_rates,
                    run_convergence, solution_error_H)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "SBP_SAT_LAB_THREADS"
SUBCOMMANDS = ("verify", "stability", "solve", "converge")
OPERATOR_FAMILIES = ("csbp", "lgl", "lg", "load")
SAT_NAMES = ("br2", "ldg", "bo", "cng", "custom")
DEFAULT_SOLVE_ELEMENTS = 16


class UsageError(InvalidInputError):
    pass


# --------------------------------------------------------------------------
# option table shared by the parser and the config file


def _choices(allowed: Sequence[str]) -> Callable[[str], str]:
    def convert(raw: str) -> str:
        value = raw.strip().lower()
        if value not in allowed:
            raise UsageError(f"{raw!r} is not one of {', '.join(allowed)}")
        return value
    return convert


def _list_of(item: Callable[[str], object]) -> Callable[[str], tuple]:
    def convert(raw: str) -> tuple:
        return tuple(item(part) for part in raw.split(",") if part.strip())
    return convert


def _number(kind: type) -> Callable[[str], object]:
    def convert(raw: str):
        try:
            return kind(raw.strip())
        except ValueError:
            raise UsageError(f"expected {kind.__name__}, got {raw!r}") from None
    return convert


def _boolean(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


@dataclass(frozen=True)
class Option:
    convert: Callable[[str], object]
    default: object
    help: str
    metavar: str | None = None
    flag: bool = False


OPTIONS: dict[str, Option] = {
    "family": Option(_list_of(_choices(OPERATOR_FAMILIES)), ("csbp",),
                     "operator family; converge accepts a comma list", "{csbp,lgl,lg,load}"),
    "load": Option(str, None, "operator file to load (implies --family load)", "FILE"),
    "degree": Option(_list_of(_number(int)), (2,), "operator degree p; converge accepts a comma list", "P"),
    "nodes": Option(_number(int), None, "nodes per element (csbp only; default 20)", "N"),
    "stencil": Option(_choices(("wide", "narrow")), None,
                      "second-derivative stencil (default narrow for csbp, wide otherwise)", "{wide,narrow}"),
    "sat": Option(_list_of(_choices(SAT_NAMES)), ("br2",),
                  "SAT family; converge accepts a comma list", "{br2,ldg,bo,cng,custom}"),
    "coeffs": Option(str, None, "coefficient file for --sat custom", "FILE"),
    "alpha": Option(_number(float), DEFAULT_ALPHA, "borrowing split alpha in (0, 1]", "A"),
    "elements": Option(_list_of(_number(int)), None,
                       "element counts (solve: one count; converge: ascending list)", "N[,N...]"),
    "case": Option(_choices(tuple(CASES)), "cos30", "manufactured case", "{" + ",".join(CASES) + "}"),
    "bc_left": Option(_choices(("dirichlet", "neumann")), None, "left boundary condition kind", "KIND"),
    "bc_right": Option(_choices(("dirichlet", "neumann")), None, "right boundary condition kind", "KIND"),
    "output": Option(str, None, "solve: CSV file (default solution.csv); converge: directory "
                     "(default convergence)", "PATH"),
    "assert_rates": Option(_boolean, False, "converge: fail unless fitted rates match the reference",
                           flag=True),
    "rate_tol": Option(_number(float), 0.3, "tolerance for --assert-rates", "TOL"),
    "window": Option(_number(int), 3, "number of finest usable levels in the rate fit", "W"),
    "psd_tol": Option(_number(float), PSD_TOL, "relative tolerance of the PSD tests", "TOL"),
    "pinv_tol": Option(_number(float), PINV_REL_TOL, "relative singular-value cutoff of pseudoinverses", "TOL"),
    "accuracy_slack": Option(_number(int), 0, "lower the degree required by the accuracy checks", "K"),
    "precision": Option(_choices(("double", "extended")), "extended",
                        "floating-point format of assembly and solve", "{double,extended}"),
}


def read_config_file(path) -> dict[str, object]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in OPTIONS:
            raise UsageError(f"{path}:{number}: expected a known key=value, got {line!r}")
        try:
            values[key] = OPTIONS[key].convert(raw)
        except UsageError as exc:
            raise UsageError(f"{path}:{number}: {key}: {exc}") from None
    return values


# --------------------------------------------------------------------------
# validated configuration


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    families: tuple[str, ...]
    degrees: tuple[int, ...]
    sats: tuple[str, ...]
    load: str | None = None
    nodes: int | None = None
    stencil: str | None = None
    coeffs: str | None = None
    alpha: float = DEFAULT_ALPHA
    elements: tuple[int, ...] | None = None
    case: str = "cos30"
    bc_left: str | None = None
    bc_right: str | None = None
    output: str | None = None
    assert_rates: bool = False
    rate_tol: float = 0.3
    window: int = 3
    psd_tol: float = PSD_TOL
    pinv_tol: float = PINV_REL_TOL
    accuracy_slack: int = 0
    precision: str = "extended"

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise UsageError(f"unknown subcommand {self.subcommand!r}")
        for name, flag in (("families", "family"), ("degrees", "degree"), ("sats", "sat")):
            if not getattr(self, name):
                raise UsageError(f"--{flag} needs at least one value")
        if "load" in self.families and self.load is None:
            raise UsageError("--family load needs --load FILE")
        if "custom" in self.sats and self.coeffs is None:
            raise UsageError("--sat custom needs --coeffs FILE")
        if self.subcommand == "solve" and len(self.families) * len(self.degrees) * len(self.sats) > 1:
            raise UsageError("solve takes a single family, degree and SAT")
        if any(p < 1 for p in self.degrees):
            raise UsageError(f"degrees must be positive, got {self.degrees}")
        if self.stencil == "narrow" and set(self.families) & {"lgl", "lg"}:
            raise UsageError("collocation families have the wide stencil only")
        if self.nodes is not None and self.nodes < 2:
            raise UsageError("--nodes must be at least 2")
        if self.elements is not None:
            if not self.elements:
                raise UsageError("the element list is empty")
            if any(n < 1 for n in self.elements):
                raise UsageError(f"element counts must be positive, got {self.elements}")
            if self.subcommand == "solve" and len(self.elements) != 1:
                raise UsageError("solve takes a single element count")
        if not 0.0 < self.alpha <= 1.0:
            raise UsageError(f"--alpha must lie in (0, 1], got {self.alpha}")
        if self.window < 2:
            raise UsageError("--window must be at least 2")
        if self.rate_tol <= 0 or self.psd_tol <= 0:
            raise UsageError("tolerances must be positive")
        if not 0.0 < self.pinv_tol < 1.0:
            raise UsageError("--pinv-tol must lie in (0, 1)")
        if self.accuracy_slack < 0:
            raise UsageError("--accuracy-slack must be non-negative")

    def cells(self) -> Iterator[tuple[str, int | None, str]]:
        """(operator family, degree, SAT name) grid; loaded operators carry their own degree."""
        for family in self.families:
            for p in (None,) if family == "load" else self.degrees:
                for sat in self.sats:
                    yield family, p, sat


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="FILE", help="key=value settings file; flags take precedence")
    for key, opt in OPTIONS.items():
        flag = "--" + key.replace("_", "-")
        if opt.flag:
            shared.add_argument(flag, dest=key, action="store_const", const="true",
                                default=argparse.SUPPRESS, help=opt.help)
        else:
            shared.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=opt.metavar, help=opt.help)
    parser = argparse.ArgumentParser(prog="sbp-sat-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    helps = {"verify": "check an operator against its defining identities",
             "stability": "certify SAT penalties on a two-element mesh",
             "solve": "solve one manufactured case and write the nodal solution",
             "converge": "run mesh-refinement sweeps and fit convergence rates"}
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[shared], help=helps[name])
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    given = read_config_file(args.config) if args.config else {}
    given.update({key: OPTIONS[key].convert(raw) for key, raw in vars(args).items() if key in OPTIONS})
    values = {key: opt.default for key, opt in OPTIONS.items()} | given
    if values["load"] is not None and "family" not in given:
        values["family"] = ("load",)
    return RunConfig(subcommand=args.subcommand, families=values.pop("family"),
                     degrees=values.pop("degree"), sats=values.pop("sat"), **values)


# --------------------------------------------------------------------------
# building blocks


def build_operator(cfg: RunConfig, family: str, p: int | None) -> SecondDerivOp:
    if family == "load":
        try:
            text = Path(cfg.load).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read {cfg.load}: {exc.strerror}") from None
        return parse_operator(text, cfg.pinv_tol)
    return build_second_deriv(family, p, cfg.nodes, cfg.stencil or default_stencil(family), cfg.pinv_tol)


def build_sat(cfg: RunConfig, name: str) -> SatFamily:
    if name == "custom":
        coeffs = load_custom_coeffs(cfg.coeffs)
        return SatFamily("custom", coeffs.alpha_k, coeffs=coeffs)
    return SatFamily(name, cfg.alpha)


def describe(op: SecondDerivOp, sat: str | None = None) -> str:
    text = f"{op.family} {op.stencil} p={op.degree} n_p={op.n}"
    return text if sat is None else f"{text} sat={sat}"


def cell_label(family: str, op: SecondDerivOp, sat: str) -> str:
    return f"{family}_{op.stencil}_p{op.degree}_{sat}"


def _verified(cfg: RunConfig, op: SecondDerivOp, family: str) -> SecondDerivOp:
    """Loaded operators must pass their checks before being used in a solve."""
    if family == "load":
        report = verify_first_deriv(op.base, cfg.accuracy_slack) + verify_second_deriv(
            op, cfg.accuracy_slack, cfg.pinv_tol)
        if not report.passed:
            raise UsageError(f"{cfg.load} fails operator checks: {', '.join(report.failed())}")
    return op


def thread_count(environ=os.environ) -> int:
    raw = environ.get(THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        count = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if count < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return count


# --------------------------------------------------------------------------
# subcommands


def cmd_verify(cfg: RunConfig, out: TextIO) -> int:
    status = EXIT_OK
    built = {}
    for family, p, _ in cfg.cells():
        if (family, p) in built:
            continue
        op = built[(family, p)] = build_operator(cfg, family, p)
        first = verify_first_deriv(op.base, cfg.accuracy_slack)
        second = verify_second_deriv(op, cfg.accuracy_slack, cfg.pinv_tol)
        print(f"operator: {describe(op)}", file=out)
        print("first derivative:", file=out)
        print(first.format(), file=out)
        print("second derivative:", file=out)
        print(second.format(), file=out)
        ok = first.passed and second.passed
        if not ok:
            failed = [f"d1.{n}" for n in first.failed()] + [f"d2.{n}" for n in second.failed()]
            print(f"failed: {', '.join(failed)}", file=out)
            status = EXIT_FAILED
        print(f"verified: {str(ok).lower()}", file=out)
    return status


def cmd_stability(cfg: RunConfig, out: TextIO) -> int:
    status = EXIT_OK
    for family, p, sat_name in cfg.cells():
        op = build_operator(cfg, family, p)
        sat = build_sat(cfg, sat_name)
        mesh = uniform_mesh(op, 2)
        ctx = mesh.interfaces()[0]
        c = sat.interface(ctx)
        m_symmetric, m_rowsum_zero = operator_symmetry_flags(mesh.elements[0])
        adjoint = check_adjoint_consistency(c, m_symmetric=m_symmetric)
        conservative = check_conservation(c, m_rowsum_zero=m_rowsum_zero)
        report = check_stability(ctx, c, sat.dirichlet(mesh.elements[0], "left"), cfg.psd_tol, cfg.pinv_tol)
        print(f"cell: {describe(op, sat_name)}", file=out)
        print(f"conservative: {str(conservative.passed).lower()}", file=out)
        print(f"adjoint_consistent: {str(adjoint.passed).lower()}", file=out)
        print(report.format(), file=out)
        if not report.overall:
            status = EXIT_FAILED
    return status


def _solve_case(cfg: RunConfig):
    case = CASES[cfg.case]()
    left, right = cfg.bc_left or case.bc.left.kind, cfg.bc_right or case.bc.right.kind
    return case.with_bc(left, right)


def cmd_solve(cfg: RunConfig, out: TextIO) -> int:
    family, p, sat_name = next(cfg.cells())
    case = _solve_case(cfg)
    op = _verified(cfg, build_operator(cfg, family, p), family)
    sat = build_sat(cfg, sat_name)
    n_e = cfg.elements[0] if cfg.elements else DEFAULT_SOLVE_ELEMENTS
    mesh = uniform_mesh(op, n_e, *case.domain, precision=cfg.precision)
    u_h = solve_system(assemble_primal(mesh, case.bc, sat, case.f))
    u_exact = case.u_exact(mesh.x)
    error = solution_error_H(u_h, u_exact, mesh)
    value = discrete_functional(u_h, mesh, case.functional, sat, "primal", case.bc)

    path = Path(cfg.output or "solution.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.column_stack([np.asarray(a, dtype=float) for a in (mesh.x, u_h, u_exact, u_h - u_exact)])
    lines = ["x,u_h,u_exact,error"] + [",".join(f"{v:.17g}" for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")

    print(f"case: {case.name}  bc: {case.bc.left.kind}/{case.bc.right.kind}", file=out)
    print(f"operator: {describe(op, sat_name)}  elements: {n_e}  dof: {mesh.dof}", file=out)
    print(f"solution_error_H: {error:.6e}", file=out)
    print(f"functional: {float(value):.15f}", file=out)
    if case.functional.exact_value is not None:
        print(f"functional_error: {float(abs(value - case.functional.exact_value)):.6e}", file=out)
    print(f"wrote: {path}", file=out)
    return EXIT_OK


def _converge_cell(cfg: RunConfig, family: str, op: SecondDerivOp, sat: SatFamily) -> ConvergenceTable:
    case = _solve_case(cfg)
    if case.functional.exact_value is None:
        raise UsageError("converge needs the case's own boundary kinds to measure the functional")
    return run_convergence(case, op, sat_family=sat, element_counts=cfg.elements, window=cfg.window,
                           precision=cfg.precision)


def cmd_converge(cfg: RunConfig, out: TextIO, workers: int | None = None) -> int:
    cells = []
    for family, p, sat_name in cfg.cells():
        op = _verified(cfg, build_operator(cfg, family, p), family)
        cells.append((family, op, sat_name, build_sat(cfg, sat_name)))
    workers = min(workers or thread_count(), len(cells))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_converge_cell, cfg, family, op, sat) for family, op, _, sat in cells]
        tables = [f.result() for f in futures]

    directory = Path(cfg.output or "convergence")
    directory.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for (family, op, sat_name, _), table in zip(cells, tables):
        label = cell_label(family, op, sat_name)
        (directory / f"{label}.csv").write_text(table.to_csv())
        for column in ("solution_error", "functional_error"):
            (directory / f"{label}_{column}.dat").write_text(table.plot_data(column))
        print(f"{label}: solution_rate={table.solution_rate:.3f} functional_rate={table.functional_rate:.3f}",
              file=out)
        if not cfg.assert_rates:
            continue
        claims = reference_rates(family, op.stencil, sat_name, op.degree)
        if not claims:
            print(f"  no reference rates for {label}; assertion skipped", file=out)
        for claim in claims:
            rate = rate_of(table, claim.quantity)
            ok = claim.holds(rate, cfg.rate_tol)
            print(f"  {'PASS' if ok else 'FAIL'} {claim.quantity} rate {rate:.3f}, expected "
                  f"{claim.describe(cfg.rate_tol)}", file=out)
            if not ok:
                status = EXIT_FAILED
    print(f"wrote: {directory}", file=out)
    return status


COMMANDS = {"verify": cmd_verify, "stability": cmd_stability, "solve": cmd_solve, "converge": cmd_converge}


def main(argv: Sequence[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = config_from_args(args)
        return COMMANDS[cfg.subcommand](cfg, out)
    except (SbpSatError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
