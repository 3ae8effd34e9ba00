"""Interface and boundary penalty (SAT) coefficients and their algebraic checks.

An interface joins the right face of element ``k`` to the left face of
element ``v``; ``k`` is always the element on the left, so the global
direction used by LDG is +x.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import InvalidInputError, ParseError
from .numerics import PINV_REL_TOL, PSD_TOL, PsdReport, max_abs, psd_schur_test, symmetric_eigenvalues
from .operators import ElementOp

SatFamilyName = Literal["br2", "ldg", "bo", "cng", "custom"]
FAMILIES = ("br2", "ldg", "bo", "cng")
DEFAULT_ALPHA = 0.5

_COEFF_KEYS = ("T1_k", "T1_v", "T2_k", "T2_v", "T3_k", "T3_v", "T4_k", "T4_v", "TD")


@dataclass(frozen=True)
class SatCoeffs:
    T1_k: float = 0.0
    T1_v: float = 0.0
    T2_k: float = 0.0
    T2_v: float = 0.0
    T3_k: float = 0.0
    T3_v: float = 0.0
    T4_k: float = 0.0
    T4_v: float = 0.0
    TD: float = 0.0
    alpha_k: float = DEFAULT_ALPHA
    alpha_v: float = DEFAULT_ALPHA
    family: SatFamilyName = "custom"

    def __post_init__(self):
        for name in _COEFF_KEYS + ("alpha_k", "alpha_v"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidInputError(f"SAT coefficient {name} is not finite")
        if not (0.0 < self.alpha_k <= 1.0 and 0.0 < self.alpha_v <= 1.0):
            raise InvalidInputError(f"alpha values must lie in (0, 1], got {self.alpha_k}, {self.alpha_v}")

    @property
    def sigma_k(self) -> float:
        return self.T2_k + self.T3_k - 1.0

    @property
    def sigma_v(self) -> float:
        return self.T2_v + self.T3_v - 1.0

    def swapped(self) -> "SatCoeffs":
        """The same coefficients seen from element ``v``."""
        return replace(self, T1_k=self.T1_v, T1_v=self.T1_k, T2_k=self.T2_v, T2_v=self.T2_k,
                       T3_k=self.T3_v, T3_v=self.T3_k, T4_k=self.T4_v, T4_v=self.T4_k,
                       alpha_k=self.alpha_v, alpha_v=self.alpha_k)


@dataclass(frozen=True)
class InterfaceContext:
    """Face data of the two elements meeting at an interior interface."""

    left: ElementOp
    right: ElementOp

    def __post_init__(self):
        if not np.isclose(self.left.x_right, self.right.x_left, rtol=0, atol=1e-12):
            raise InvalidInputError("interface elements do not share a face")

    @property
    def R_k(self) -> np.ndarray:
        return self.left.R_right

    @property
    def R_v(self) -> np.ndarray:
        return self.right.R_left

    @property
    def D_k(self) -> np.ndarray:
        return self.left.normal_derivative("right")

    @property
    def D_v(self) -> np.ndarray:
        return self.right.normal_derivative("left")

    @property
    def C_k(self) -> np.ndarray:
        return self.left.flux_coupling("right")

    @property
    def C_v(self) -> np.ndarray:
        return self.right.flux_coupling("left")

    @property
    def q_k(self) -> float:
        return self.left.borrowing("right")

    @property
    def q_v(self) -> float:
        return self.right.borrowing("left")

    @property
    def face_diffusivity(self) -> tuple[float, float]:
        return (float(self.left.R_right @ self.left.Lambda), float(self.right.R_left @ self.right.Lambda))


@dataclass(frozen=True)
class BoundaryContext:
    """A Dirichlet face together with its penalty and borrowing weight."""

    element: ElementOp
    side: Literal["left", "right"]
    TD: float
    alpha: float = DEFAULT_ALPHA

    @property
    def C(self) -> np.ndarray:
        return self.element.flux_coupling(self.side)

    @property
    def q(self) -> float:
        return self.element.borrowing(self.side)


# --------------------------------------------------------------------------
# families


def br2_coeffs(ctx: InterfaceContext, alpha_k: float = DEFAULT_ALPHA,
               alpha_v: float = DEFAULT_ALPHA) -> SatCoeffs:
    t1 = ctx.q_k / (2 * alpha_k) + ctx.q_v / (2 * alpha_v)
    return SatCoeffs(T1_k=t1, T1_v=t1, T2_k=-0.5, T2_v=-0.5, T3_k=0.5, T3_v=0.5,
                     TD=2 * ctx.q_k / alpha_k, alpha_k=alpha_k, alpha_v=alpha_v, family="br2")


def ldg_coeffs(ctx: InterfaceContext, alpha_k: float = DEFAULT_ALPHA,
               alpha_v: float = DEFAULT_ALPHA) -> SatCoeffs:
    t1 = 2 * ctx.q_k / alpha_k
    return SatCoeffs(T1_k=t1, T1_v=t1, T2_k=-1.0, T3_v=1.0, TD=t1,
                     alpha_k=alpha_k, alpha_v=alpha_v, family="ldg")


def bo_coeffs(ctx: InterfaceContext, alpha_k: float = DEFAULT_ALPHA,
              alpha_v: float = DEFAULT_ALPHA) -> SatCoeffs:
    return SatCoeffs(T2_k=0.5, T2_v=0.5, T3_k=0.5, T3_v=0.5, TD=2 * ctx.q_k / alpha_k,
                     alpha_k=alpha_k, alpha_v=alpha_v, family="bo")


def cng_coeffs(ctx: InterfaceContext, alpha_k: float = DEFAULT_ALPHA,
               alpha_v: float = DEFAULT_ALPHA) -> SatCoeffs:
    t1 = ctx.q_k / (8 * alpha_k) + ctx.q_v / (8 * alpha_v)
    return SatCoeffs(T1_k=t1, T1_v=t1, T3_k=0.5, T3_v=0.5, TD=2 * ctx.q_k / alpha_k,
                     alpha_k=alpha_k, alpha_v=alpha_v, family="cng")


_BUILDERS = {"br2": br2_coeffs, "ldg": ldg_coeffs, "bo": bo_coeffs, "cng": cng_coeffs}


@dataclass(frozen=True)
class SatFamily:
    """A rule producing coefficients for every interface and Dirichlet face.

    ``t1_scale`` and ``td_scale`` multiply the interface and Dirichlet
    penalties of a built-in family; they exist for stability experiments.
    A ``custom`` family applies the fixed ``coeffs`` everywhere.
    """

    name: SatFamilyName
    alpha: float = DEFAULT_ALPHA
    t1_scale: float = 1.0
    td_scale: float = 1.0
    coeffs: SatCoeffs | None = None

    def __post_init__(self):
        if self.name == "custom":
            if self.coeffs is None:
                raise InvalidInputError("a custom SAT family needs explicit coefficients")
        elif self.name not in _BUILDERS:
            raise InvalidInputError(f"unknown SAT family {self.name!r}; choose from {FAMILIES} or custom")
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in (0, 1], got {self.alpha}")

    def interface(self, ctx: InterfaceContext) -> SatCoeffs:
        if self.name == "custom":
            return self.coeffs
        c = _BUILDERS[self.name](ctx, self.alpha, self.alpha)
        return replace(c, T1_k=c.T1_k * self.t1_scale, T1_v=c.T1_v * self.t1_scale)

    def dirichlet(self, element: ElementOp, side: Literal["left", "right"]) -> BoundaryContext:
        if self.name == "custom":
            return BoundaryContext(element, side, self.coeffs.TD, self.coeffs.alpha_k)
        td = 2.0 * element.borrowing(side) / self.alpha
        return BoundaryContext(element, side, td * self.td_scale, self.alpha)


def parse_custom_coeffs(text: str) -> SatCoeffs:
    """Parse ``sat custom T1_k=<r> ... alpha=<r>``; omitted penalties are 0."""
    tokens = text.split()
    if tokens[:2] != ["sat", "custom"]:
        raise ParseError("coefficient file must start with 'sat custom'", 1)
    values: dict[str, float] = {}
    for token in tokens[2:]:
        m = re.fullmatch(r"(\w+)=(\S+)", token)
        if not m:
            raise ParseError(f"malformed coefficient entry {token!r}")
        key, raw = m.groups()
        if key not in _COEFF_KEYS + ("alpha", "alpha_k", "alpha_v"):
            raise ParseError(f"unknown coefficient {key!r}")
        try:
            values[key] = float(raw)
        except ValueError:
            raise ParseError(f"non-numeric value for {key}: {raw!r}") from None
    alpha = values.pop("alpha", DEFAULT_ALPHA)
    values.setdefault("alpha_k", alpha)
    values.setdefault("alpha_v", alpha)
    try:
        return SatCoeffs(**values, family="custom")
    except InvalidInputError as exc:
        raise ParseError(str(exc)) from None


def load_custom_coeffs(path) -> SatCoeffs:
    try:
        return parse_custom_coeffs(Path(path).read_text())
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None


# --------------------------------------------------------------------------
# consistency and conservation


@dataclass(frozen=True)
class ConditionSet:
    """Outcome of a list of named scalar conditions; truthy when all hold."""

    conditions: dict[str, bool] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return all(self.conditions.values())

    @property
    def passed(self) -> bool:
        return bool(self)

    def failed(self) -> list[str]:
        return [name for name, ok in self.conditions.items() if not ok]


def _equal(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))


def check_adjoint_consistency(c_k: SatCoeffs, c_v: SatCoeffs | None = None,
                              m_symmetric: bool = True) -> ConditionSet:
    """Conditions under which the discrete adjoint problem is consistent.

    ``c_v`` is the coefficient set as seen from element ``v`` and defaults to
    ``c_k.swapped()``, since one interface carries both sides' values.
    """
    c_v = c_k.swapped() if c_v is None else c_v
    return ConditionSet({
        "T1_k = T1_v": _equal(c_k.T1_k, c_v.T1_k),
        "T2_k + 1 = -T2_v": _equal(c_k.T2_k + 1.0, -c_v.T2_k),
        "T3_k - 1 = -T3_v": _equal(c_k.T3_k - 1.0, -c_v.T3_k),
        "T4_k = T4_v": _equal(c_k.T4_k, c_v.T4_k),
        "M symmetric": bool(m_symmetric),
    })


def check_conservation(c_k: SatCoeffs, c_v: SatCoeffs | None = None,
                       m_rowsum_zero: bool = True) -> ConditionSet:
    c_v = c_k.swapped() if c_v is None else c_v
    return ConditionSet({
        "T1_k = T1_v": _equal(c_k.T1_k, c_v.T1_k),
        "T3_k - 1 = -T3_v": _equal(c_k.T3_k - 1.0, -c_v.T3_k),
        "1^T M = 0": bool(m_rowsum_zero),
    })


def operator_symmetry_flags(element: ElementOp) -> tuple[bool, bool]:
    """(M symmetric, 1^T M = 0) for an element operator."""
    M = element.M
    scale = max(1.0, max_abs(M))
    return (max_abs(M - M.T) <= 1e-12 * scale,
            max_abs(np.ones(M.shape[0]) @ M) <= 1e-11 * scale)


# --------------------------------------------------------------------------
# stability


def assemble_interface_A(ctx: InterfaceContext, c: SatCoeffs) -> np.ndarray:
    """Interface energy matrix acting on ``[R_k u_k, R_v u_v, D_b u_k, D_b u_v]``.

    The energy contributed by the interface equals ``x^T A x / 2`` (the T4
    terms are checked separately). The coupling blocks use the coefficients
    themselves, which reduces to the ``sigma C`` form for conservative sets.
    """
    C_k, C_v = ctx.C_k, ctx.C_v
    n_k, n_v = C_k.size, C_v.size
    size = 2 + n_k + n_v
    A = np.zeros((size, size))
    wk = slice(2, 2 + n_k)
    wv = slice(2 + n_k, size)
    A[0, 0] = 2 * c.T1_k
    A[1, 1] = 2 * c.T1_v
    A[0, 1] = A[1, 0] = -(c.T1_k + c.T1_v)
    couplings = (
        (0, wk, c.sigma_k * C_k),
        (1, wk, (c.T3_v - c.T2_k) * C_k),
        (0, wv, (c.T3_k - c.T2_v) * C_v),
        (1, wv, c.sigma_v * C_v),
    )
    for row, cols, values in couplings:
        A[row, cols] = values
        A[cols, row] = values
    A[wk, wk] = c.alpha_k * ctx.left.V
    A[wv, wv] = c.alpha_v * ctx.right.V
    return A


def assemble_dirichlet_A(bctx: BoundaryContext) -> np.ndarray:
    """Boundary energy matrix ``[[2 TD, -2 C], [-2 C^T, alpha V]]``."""
    C = bctx.C
    n = C.size
    A = np.zeros((1 + n, 1 + n))
    A[0, 0] = 2 * bctx.TD
    A[0, 1:] = A[1:, 0] = -2 * C
    A[1:, 1:] = bctx.alpha * bctx.element.V
    return A


@dataclass(frozen=True)
class StabilityReport:
    A_psd: PsdReport
    neumann_block_psd: bool
    dirichlet_block_psd: PsdReport | None
    margins: dict[str, float]
    overall: bool

    def format(self) -> str:
        def verdict(r: PsdReport | None) -> str:
            if r is None:
                return "n/a"
            tag = "" if r.is_psd else f" ({r.failed_condition})"
            return f"{'psd' if r.is_psd else 'NOT psd'}{tag}, min_eig={r.min_eigenvalue:.3e}"
        lines = [f"interface_block: {verdict(self.A_psd)}",
                 f"neumann_block: {'psd' if self.neumann_block_psd else 'NOT psd'}",
                 f"dirichlet_block: {verdict(self.dirichlet_block_psd)}"]
        lines += [f"margin {name}: {value:+.6e}" for name, value in self.margins.items()]
        lines.append(f"stable: {str(self.overall).lower()}")
        return "\n".join(lines)


def stability_margins(ctx: InterfaceContext, c: SatCoeffs,
                      dirichlet_ctx: BoundaryContext | None = None) -> dict[str, float]:
    """Signed scalar margins of the penalty inequalities.

    ``T1_bound`` is the inequality written with ``T2`` (valid when
    ``T3 - T2 = 1``), ``T1_schur`` its general form in terms of ``sigma``.
    """
    q_k, q_v = ctx.q_k, ctx.q_v
    t1 = 0.5 * (c.T1_k + c.T1_v)
    margins = {
        "T1_bound": t1 - (2 / c.alpha_k) * c.T2_k**2 * q_k - (2 / c.alpha_v) * c.T2_v**2 * q_v,
        "T1_schur": t1 - c.sigma_k**2 * q_k / (2 * c.alpha_k) - c.sigma_v**2 * q_v / (2 * c.alpha_v),
        "T4": min(c.T4_k, c.T4_v),
    }
    if dirichlet_ctx is not None:
        margins["TD"] = dirichlet_ctx.TD - (2 / dirichlet_ctx.alpha) * dirichlet_ctx.q
    return margins


def _psd_of_split(A: np.ndarray, split: int, tol: float, rel_tol: float) -> PsdReport:
    return psd_schur_test(A[:split, :split], A[:split, split:], A[split:, split:], tol, rel_tol)


def check_stability(ctx: InterfaceContext, c: SatCoeffs,
                    dirichlet_ctx: BoundaryContext | None = None,
                    tol: float = PSD_TOL, rel_tol: float = PINV_REL_TOL) -> StabilityReport:
    A = assemble_interface_A(ctx, c)
    a_report = _psd_of_split(A, 2, tol, rel_tol)
    t4 = np.array([[2 * c.T4_k, c.T4_k + c.T4_v], [c.T4_k + c.T4_v, 2 * c.T4_v]])
    t4_scale = max(1.0, max_abs(t4))
    neumann_ok = bool(symmetric_eigenvalues(t4)[0] >= -tol * t4_scale)
    d_report = None
    if dirichlet_ctx is not None:
        d_report = _psd_of_split(assemble_dirichlet_A(dirichlet_ctx), 1, tol, rel_tol)
    overall = a_report.is_psd and neumann_ok and (d_report is None or d_report.is_psd)
    return StabilityReport(a_report, neumann_ok, d_report,
                           stability_margins(ctx, c, dirichlet_ctx), bool(overall))
