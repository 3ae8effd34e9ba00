"""Manufactured solutions, mesh-refinement sweeps and rate fitting."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import mpmath
import numpy as np

from .assembly import (BoundaryCondition, BoundarySpec, FunctionalSpec, Mesh1D, assemble_adjoint, assemble_primal,
                       dirichlet, discrete_functional, neumann, solve_system, uniform_mesh)
from .errors import FitError, InvalidInputError, SbpSatError
from .operators import Precision, SecondDerivOp, build_second_deriv, to_extended
from .sats import SatFamily

DEFAULT_ELEMENT_COUNTS = (8, 16, 32, 64, 128)
MIN_COARSE_DOF = 100

# Relative error below which a refinement step gaining less than a factor
# of two is read as a rounding plateau rather than discretisation error.
PLATEAU_LEVEL = 1e-8

# Relative errors below these levels are dominated by the rounding of the
# assembled matrices (entries grow like 1/h^2), measured on the built-in
# operators at desk-scale meshes.
ROUNDING_FLOOR = {"double": 1e-11, "extended": 1e-15}


@dataclass(frozen=True)
class ManufacturedCase:
    name: str
    u_exact: Callable[[np.ndarray], np.ndarray]
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    bc: BoundarySpec
    functional: FunctionalSpec
    du_exact: Callable[[np.ndarray], np.ndarray] | None = None
    domain: tuple[float, float] = (0.0, 1.0)

    @property
    def u_D(self) -> float:
        return self.bc.left.value

    @property
    def u_N(self) -> float:
        return self.bc.right.value

    def with_bc(self, left: str, right: str) -> "ManufacturedCase":
        """Same solution with each side switched to ``dirichlet`` or ``neumann`` data.

        The functional keeps its value only when the kinds are unchanged, so
        any other combination drops ``exact_value``.
        """
        if (left, right) == (self.bc.left.kind, self.bc.right.kind):
            return self
        if self.du_exact is None:
            raise InvalidInputError(f"case {self.name!r} has no exact derivative for Neumann data")
        a, b = self.domain
        bc = BoundarySpec(_exact_condition(self, left, a, -1.0), _exact_condition(self, right, b, 1.0))
        return replace(self, bc=bc, functional=replace(self.functional, exact_value=None))


def _exact_condition(case: ManufacturedCase, kind: str, x: float, normal: float) -> BoundaryCondition:
    point = np.array([x])
    if kind == "dirichlet":
        return dirichlet(float(case.u_exact(point)[0]))
    if kind == "neumann":
        return neumann(normal * float(case.du_exact(point)[0]))
    raise InvalidInputError(f"boundary kind must be dirichlet or neumann, got {kind!r}")


def poisson_cos30_case() -> ManufacturedCase:
    """``-u'' = 900 cos(30x)`` with ``u(0) = 1`` and ``u'(1) = -30 sin(30)``.

    The functional weights ``u`` by ``g = cos(30x)`` and adds ``psi_N u(1)``.
    The flux weight ``psi_D`` multiplies ``u'(0) = 0`` and is set to zero,
    which makes the adjoint ``(cos(30x) - 1 + (1 - cos 30) x) / 900``.
    Constants are long doubles so extended-precision runs see exact data.
    """
    with mpmath.workdps(40):
        s30, c30 = mpmath.sin(30), mpmath.cos(30)
        psi_N = (1 - 30 * s30 - c30) / 900
        exact = mpmath.mpf(1) / 2 + mpmath.sin(60) / 120 + psi_N * c30
        flux = -30 * s30
    return ManufacturedCase(
        name="cos30",
        u_exact=lambda x: np.cos(30 * x),
        f=lambda x: 900 * np.cos(30 * x),
        g=lambda x: np.cos(30 * x),
        bc=BoundarySpec(dirichlet(1.0), neumann(to_extended(flux))),
        functional=FunctionalSpec(lambda x: np.cos(30 * x), psi_D=0.0, psi_N=to_extended(psi_N),
                                  exact_value=to_extended(exact)),
        du_exact=lambda x: -30 * np.sin(30 * x),
    )


def cos30_adjoint_exact(x: np.ndarray) -> np.ndarray:
    c30 = math.cos(30.0)
    return (np.cos(30.0 * x) - 1.0 + (1.0 - c30) * x) / 900.0


def linear_case() -> ManufacturedCase:
    """``u = x``: zero source, ``u(0) = 0``, ``u'(1) = 1``; functional ``int u``."""
    return ManufacturedCase(
        name="linear",
        u_exact=lambda x: np.array(x),
        f=lambda x: np.zeros_like(x),
        g=lambda x: np.ones_like(x),
        bc=BoundarySpec(dirichlet(0.0), neumann(1.0)),
        functional=FunctionalSpec(lambda x: np.ones_like(x), exact_value=0.5),
        du_exact=lambda x: np.ones_like(x),
    )


CASES = {"cos30": poisson_cos30_case, "linear": linear_case}


def solution_error_H(u_h, u_exact_on_nodes, mesh: Mesh1D) -> float:
    """Discrete L2 error in the block-diagonal norm of the mesh."""
    diff = np.asarray(u_h, dtype=mesh.dtype) - np.asarray(u_exact_on_nodes, dtype=mesh.dtype)
    if diff.shape != (mesh.dof,):
        raise InvalidInputError(f"vectors have {diff.size} entries, mesh has {mesh.dof} dof")
    total = sum(diff[mesh.block(i)] @ e.H @ diff[mesh.block(i)] for i, e in enumerate(mesh.elements))
    return float(np.sqrt(max(total, 0)))


def fit_rate(h: Sequence[float], errors: Sequence[float], window: int = 3) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)`` over the last ``window`` rows."""
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if window < 2:
        raise FitError(f"a rate needs a window of at least 2 rows, got {window}")
    if h.size < window or errors.size != h.size:
        raise FitError(f"need {window} rows to fit, got {min(h.size, errors.size)}")
    h, errors = h[-window:], errors[-window:]
    if np.any(errors <= 0) or np.any(h <= 0):
        raise FitError("errors in the fit window must be positive (rounding floor reached?)")
    slope, _ = np.polyfit(np.log(h), np.log(errors), 1)
    return float(slope)


def usable_rows(errors: Sequence[float], scale: float, precision: Precision = "extended") -> int:
    """Number of leading rows left after trimming a trailing rounding plateau.

    A trailing row is dropped when its error is not positive, is below
    ``ROUNDING_FLOOR[precision] * scale``, or is below ``PLATEAU_LEVEL * scale``
    while gaining less than a factor of two on the previous row. Interior
    rows are never dropped, so a genuinely stalled sweep still fits (and
    fails) on its own data.
    """
    errors = np.asarray(errors, dtype=float)
    floor = ROUNDING_FLOOR[precision] * scale
    keep = errors.size
    while keep:
        err = errors[keep - 1]
        stalled = keep >= 2 and err < PLATEAU_LEVEL * scale and err > errors[keep - 2] / 2
        if err > floor and not stalled:
            break
        keep -= 1
    return keep


def fit_with_floor(h, errors, window: int, scale: float,
                   precision: Precision = "extended") -> tuple[float, tuple[int, ...]]:
    """Fit over the last ``window`` rows before any rounding plateau.

    Returns the rate and the row indices used; the rate is NaN when fewer
    than two rows remain.
    """
    keep = usable_rows(errors, scale, precision)
    width = min(window, keep)
    if width < 2:
        return float("nan"), ()
    idx = list(range(keep - width, keep))
    return fit_rate(np.asarray(h)[idx], np.asarray(errors)[idx], width), tuple(idx)


@dataclass(frozen=True)
class ConvergenceRow:
    n_elements: int
    dof: int
    h: float
    solution_error: float
    functional_error: float
    adjoint_functional_error: float | None = None


@dataclass(frozen=True)
class ConvergenceTable:
    rows: tuple[ConvergenceRow, ...]
    solution_rate: float
    functional_rate: float
    solution_window: tuple[int, ...]
    functional_window: tuple[int, ...]
    label: str = ""
    metadata: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("n_elements,dof,h,solution_error,functional_error\n")
        for r in self.rows:
            out.write(f"{r.n_elements},{r.dof},{r.h:.17g},{r.solution_error:.17g},{r.functional_error:.17g}\n")
        out.write(f"# solution_rate={self.solution_rate:.6f}\n")
        out.write(f"# functional_rate={self.functional_rate:.6f}\n")
        return out.getvalue()

    def plot_data(self, column: str) -> str:
        """Two-column ``h error`` text, one line per refinement level."""
        lines = [f"# h {column}"]
        lines += [f"{r.h:.17g} {getattr(r, column):.17g}" for r in self.rows]
        return "\n".join(lines) + "\n"


def default_element_counts(n_p: int, levels: int = 5) -> tuple[int, ...]:
    """Doubling sequence from 8 elements, started where the dof reach 100."""
    start = 8
    while start * n_p < MIN_COARSE_DOF:
        start *= 2
    return tuple(start * 2**i for i in range(levels))


def default_stencil(operator_family: str) -> str:
    return "narrow" if operator_family == "csbp" else "wide"


def run_convergence(case: ManufacturedCase, operator_family: str | SecondDerivOp, p: int | None = None,
                    n_p: int | None = None, sat_family: str | SatFamily = "br2",
                    element_counts: Sequence[int] | None = None, stencil: str | None = None,
                    window: int = 3, solve_adjoint: bool = False,
                    precision: Precision = "extended") -> ConvergenceTable:
    """Solve ``case`` on successively refined uniform meshes and fit rates.

    ``operator_family`` is a family name (``csbp``, ``lgl``, ``lg``) or an
    already built reference operator. High-order runs reach errors near
    double-precision rounding on fine meshes, hence the long-double default.
    """
    if isinstance(operator_family, SecondDerivOp):
        op = operator_family
        label_family = op.family
    else:
        stencil = stencil or default_stencil(operator_family)
        op = build_second_deriv(operator_family, p, n_p, stencil)
        label_family = operator_family
    family = sat_family if isinstance(sat_family, SatFamily) else SatFamily(sat_family)
    counts = tuple(element_counts) if element_counts is not None else default_element_counts(op.n)
    if not counts:
        raise InvalidInputError("element_counts is empty")
    if any(c < 1 for c in counts) or any(b <= a for a, b in zip(counts, counts[1:])):
        raise InvalidInputError(f"element_counts must be positive and ascending, got {counts}")
    spec = case.functional
    if spec.exact_value is None:
        raise InvalidInputError("the case needs an exact functional value")
    a, b = case.domain
    rows = []
    for n_e in counts:
        try:
            mesh = uniform_mesh(op, n_e, a, b, precision=precision)
            primal = assemble_primal(mesh, case.bc, family, case.f)
            u_h = solve_system(primal)
            sol_err = solution_error_H(u_h, case.u_exact(mesh.x), mesh)
            fun_err = float(abs(discrete_functional(u_h, mesh, spec, family, "primal", case.bc)
                                - spec.exact_value))
            adj_err = None
            if solve_adjoint:
                adj = assemble_adjoint(mesh, case.bc, family, spec.g, spec.psi_D, spec.psi_N)
                psi_h = solve_system(adj)
                adj_err = float(abs(discrete_functional(psi_h, mesh, spec, family, "adjoint", case.bc, case.f)
                                    - spec.exact_value))
        except SbpSatError as exc:
            raise SbpSatError(f"refinement level n_elements={n_e}: {exc}") from exc
        h = (b - a) / (n_e * (op.n - 1))
        rows.append(ConvergenceRow(n_e, mesh.dof, h, sol_err, fun_err, adj_err))
    h = [r.h for r in rows]
    sol_rate, sol_idx = fit_with_floor(h, [r.solution_error for r in rows], window, 1.0, precision)
    fun_rate, fun_idx = fit_with_floor(h, [r.functional_error for r in rows], window,
                                       float(abs(spec.exact_value)), precision)
    label = f"{label_family}_{op.stencil}_p{op.degree}_{family.name}"
    meta = {"case": case.name, "family": label_family, "stencil": op.stencil, "degree": op.degree,
            "n_p": op.n, "sat": family.name, "alpha": family.alpha, "precision": precision}
    return ConvergenceTable(tuple(rows), sol_rate, fun_rate, sol_idx, fun_idx, label, meta)


@dataclass(frozen=True)
class RateClaim:
    """Expected fitted rate: ``target +- tol`` or, when ``at_least``, ``>= target - tol``."""

    quantity: str
    target: float
    at_least: bool = False

    def holds(self, rate: float, tol: float) -> bool:
        if not math.isfinite(rate):
            return False
        return rate >= self.target - tol if self.at_least else abs(rate - self.target) <= tol

    def describe(self, tol: float) -> str:
        return f">= {self.target - tol:g}" if self.at_least else f"{self.target:g} +- {tol:g}"


_ADJOINT_CONSISTENT = ("br2", "ldg")


def reference_rates(operator_family: str, stencil: str, sat: str, p: int) -> tuple[RateClaim, ...]:
    """Expected asymptotic rates for a built-in configuration; empty when none is known.

    Adjoint-consistent penalties give functional rate ``2p``. Solutions
    converge at ``p + 2`` for narrow stencils (``p + 1`` at ``p = 1``) and
    ``p + 1`` for wide collocation stencils. The inconsistent families on
    wide collocation stencils lose one order at even degree.
    """
    claims = []
    collocation = operator_family in ("lgl", "lg") and stencil == "wide"
    narrow = operator_family == "csbp" and stencil == "narrow"
    if sat in _ADJOINT_CONSISTENT:
        if operator_family in ("csbp", "lgl", "lg"):
            claims.append(RateClaim("functional", 2 * p))
        if narrow:
            claims.append(RateClaim("solution", p + 1, at_least=True) if p == 1
                          else RateClaim("solution", p + 2))
        elif collocation:
            claims.append(RateClaim("solution", p + 1))
    elif sat in ("bo", "cng"):
        if collocation:
            claims.append(RateClaim("solution", p + 1 if p % 2 else p))
        elif narrow:
            claims.append(RateClaim("solution", p + 1 if p in (1, 3) else p + 2))
            if p <= 2:
                claims.append(RateClaim("functional", 2 * p))
    return tuple(claims)


def rate_of(table: ConvergenceTable, quantity: str) -> float:
    return table.solution_rate if quantity == "solution" else table.functional_rate
