"""Summation-by-parts operators on the reference element [0, 1].

First-derivative operators come in three built-in flavours: classical
finite-difference (``csbp``) with diagonal norms, Legendre-Gauss-Lobatto
(``lgl``) and Legendre-Gauss (``lg``) collocation. Second-derivative operators
are either wide (``D Lambda D``) or narrow (compact, minimal bandwidth, CSBP
only). Operators can also be read from and written to a plain text format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Literal

import mpmath
import numpy as np
from numpy.polynomial import legendre as npleg

from ._csbp_closures import CLOSURE_SIZE, closure
from .errors import ConstructionError, InvalidInputError, ParseError, VerificationError
from .numerics import PINV_REL_TOL, max_abs, pseudoinverse, symmetric_eigenvalues

Family = Literal["csbp", "lgl", "lg", "external"]
Stencil = Literal["wide", "narrow"]

MAX_COLLOCATION_DEGREE = 10
CSBP_DEGREES = (1, 2, 3, 4)
EXTENDED = np.longdouble
Precision = Literal["double", "extended"]

# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class NodeSet:
    points: np.ndarray
    includes_left_boundary: bool
    includes_right_boundary: bool

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise InvalidInputError("a node set needs at least two points")
        if np.any(np.diff(pts) <= 0):
            raise InvalidInputError("nodes must be strictly ascending")
        if pts[0] < -1e-14 or pts[-1] > 1 + 1e-14:
            raise InvalidInputError("nodes must lie in the reference element [0, 1]")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, points) -> "NodeSet":
        pts = np.asarray(points, dtype=float)
        return cls(pts, bool(abs(pts[0]) < 1e-14), bool(abs(pts[-1] - 1) < 1e-14))

    def __len__(self) -> int:
        return self.points.size


@dataclass(frozen=True, eq=False)
class ExtendedFirst:
    """Long-double copies of a first-derivative operator with a diagonal norm.

    Built from exact or high-precision data so that global systems can be
    assembled well below double-precision rounding.
    """

    x: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    E: np.ndarray
    R_left: np.ndarray
    R_right: np.ndarray

    @cached_property
    def D(self) -> np.ndarray:
        return self.Q / np.diag(self.H)[:, None]


@dataclass(frozen=True, eq=False)
class ExtendedSecond:
    D2: np.ndarray
    D_b: np.ndarray
    M: np.ndarray
    Lambda: np.ndarray


@dataclass(frozen=True, eq=False)
class FirstDerivOp:
    """Degree-``p`` SBP first derivative ``D = H^{-1} Q`` on the reference element.

    ``extended`` optionally carries long-double copies of the matrices.
    """

    degree: int
    nodes: NodeSet
    H: np.ndarray
    Q: np.ndarray
    E: np.ndarray
    R_left: np.ndarray
    R_right: np.ndarray
    family: Family
    extended: ExtendedFirst | None = field(default=None, repr=False)

    @cached_property
    def D(self) -> np.ndarray:
        return np.linalg.solve(self.H, self.Q)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def x(self) -> np.ndarray:
        return self.nodes.points


@dataclass(frozen=True, eq=False)
class SecondDerivOp:
    """Second-derivative operator with its decomposition ``H D2 = -M + E Lambda D_b``.

    For wide operators ``V`` holds ``H Lambda + Lambda H`` and ``V_pinv`` its
    inverse, which is the quantity every penalty bound uses in that case.
    """

    base: FirstDerivOp
    D2: np.ndarray
    D_b: np.ndarray
    M: np.ndarray
    V: np.ndarray
    V_pinv: np.ndarray
    stencil: Stencil
    Lambda: np.ndarray
    extended: ExtendedSecond | None = field(default=None, repr=False)

    @property
    def degree(self) -> int:
        return self.base.degree

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def family(self) -> Family:
        return self.base.family

    @property
    def constant_diffusivity(self) -> bool:
        return bool(np.all(self.Lambda == self.Lambda[0]))


@dataclass(frozen=True, eq=False)
class ElementOp:
    """A reference operator mapped affinely onto ``[x_left, x_right]``.

    With extended precision every matrix except ``V`` and ``V_pinv`` is a
    long-double array; the penalty scalars are only needed in double.
    """

    reference: SecondDerivOp
    x_left: float
    x_right: float
    h: float
    x: np.ndarray
    H: np.ndarray
    D: np.ndarray
    D2: np.ndarray
    D_b: np.ndarray
    M: np.ndarray
    V: np.ndarray
    V_pinv: np.ndarray
    E: np.ndarray
    R_left: np.ndarray
    R_right: np.ndarray
    Lambda: np.ndarray

    @property
    def n(self) -> int:
        return self.x.size

    def face_row(self, side: Literal["left", "right"]) -> np.ndarray:
        return self.R_left if side == "left" else self.R_right

    @property
    def precision(self) -> Precision:
        return "extended" if self.H.dtype == EXTENDED else "double"

    def normal(self, side: Literal["left", "right"]) -> float:
        return -1.0 if side == "left" else 1.0

    def normal_derivative(self, side: Literal["left", "right"]) -> np.ndarray:
        """Row ``n R Lambda D_b`` approximating the outward flux at a face."""
        return self.normal(side) * (self.face_row(side) * self.Lambda) @ self.D_b

    def flux_coupling(self, side: Literal["left", "right"]) -> np.ndarray:
        """Row ``C = n R Lambda`` acting on ``D_b u``."""
        return self.normal(side) * self.face_row(side) * self.Lambda

    def borrowing(self, side: Literal["left", "right"]) -> float:
        """Scalar ``R Lambda V^+ Lambda R^T`` at a face."""
        row = np.asarray(self.face_row(side) * self.Lambda, dtype=float)
        return float(row @ self.V_pinv @ row)


# --------------------------------------------------------------------------
# collocation operators


def _legendre_nodes(p: int, lobatto: bool) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the (p+1)-point rule mapped to [0, 1]."""
    if lobatto:
        interior = npleg.legroots(npleg.legder([0] * p + [1])) if p > 1 else np.array([])
        xi = np.concatenate(([-1.0], np.sort(interior), [1.0]))
        pp = npleg.legval(xi, [0] * p + [1])
        w = 2.0 / (p * (p + 1) * pp**2)
    else:
        xi, w = npleg.leggauss(p + 1)
    return 0.5 * (xi + 1.0), 0.5 * w


def _extended_legendre_nodes(p: int, lobatto: bool) -> tuple[np.ndarray, np.ndarray]:
    """:func:`_legendre_nodes` refined with mpmath and rounded to long double."""
    guess, _ = _legendre_nodes(p, lobatto)
    with mpmath.workdps(40):
        if lobatto:
            # interior LGL nodes are the roots of P_{p-1} - t P_p
            poly = lambda t: mpmath.legendre(p - 1, t) - t * mpmath.legendre(p, t)  # noqa: E731
        else:
            poly = lambda t: mpmath.legendre(p + 1, t)  # noqa: E731
        ts = []
        for i, g in enumerate(2.0 * guess - 1.0):
            if lobatto and i in (0, p):
                ts.append(mpmath.mpf(-1 if i == 0 else 1))
            else:
                ts.append(mpmath.findroot(poly, mpmath.mpf(g)))
        if lobatto:
            ws = [mpmath.mpf(2) / (p * (p + 1) * mpmath.legendre(p, t) ** 2) for t in ts]
        else:
            ws = [2 * (1 - t**2) / ((p + 1) ** 2 * mpmath.legendre(p, t) ** 2) for t in ts]
        x = [to_extended((t + 1) / 2) for t in ts]
        w = [to_extended(wt / 2) for wt in ws]
    return np.array(x, dtype=EXTENDED), np.array(w, dtype=EXTENDED)


def to_extended(value) -> np.longdouble:
    """Round an mpmath or sympy number to long double via its decimal expansion."""
    with mpmath.workdps(40):
        return EXTENDED(mpmath.nstr(mpmath.mpf(value), 30, strip_zeros=False))


def _barycentric_weights(x: np.ndarray) -> np.ndarray:
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


def lagrange_derivative_matrix(x: np.ndarray) -> np.ndarray:
    """Differentiation matrix of the Lagrange interpolant through ``x``."""
    w = _barycentric_weights(x)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    d = (w[None, :] / w[:, None]) / diff
    np.fill_diagonal(d, 0.0)
    np.fill_diagonal(d, -d.sum(axis=1))
    return d


def lagrange_row(x: np.ndarray, at: float) -> np.ndarray:
    """Values of every Lagrange basis polynomial on ``x`` at the point ``at``."""
    hit = np.isclose(x, at, rtol=0.0, atol=1e-15)
    if hit.any():
        return hit.astype(x.dtype)
    w = _barycentric_weights(x)
    terms = w / (at - x)
    return terms / terms.sum()


def _collocation_op(p: int, lobatto: bool) -> FirstDerivOp:
    if not isinstance(p, (int, np.integer)) or not 1 <= p <= MAX_COLLOCATION_DEGREE:
        raise InvalidInputError(f"degree must be an integer in [1, {MAX_COLLOCATION_DEGREE}], got {p}")
    x, w = _extended_legendre_nodes(int(p), lobatto)
    ext = _collocation_matrices(x, w)
    H, Q, E, r_left, r_right = (m.astype(float) for m in (ext.H, ext.Q, ext.E, ext.R_left, ext.R_right))
    return FirstDerivOp(int(p), NodeSet.from_points(x.astype(float)), H, Q, E, r_left, r_right,
                        "lgl" if lobatto else "lg", ext)


def _collocation_matrices(x: np.ndarray, w: np.ndarray) -> ExtendedFirst:
    H = np.diag(w)
    D = lagrange_derivative_matrix(x)
    r_left, r_right = lagrange_row(x, x.dtype.type(0)), lagrange_row(x, x.dtype.type(1))
    E = np.outer(r_right, r_right) - np.outer(r_left, r_left)
    # Q = H D satisfies Q + Q^T = E only to rounding; split off the exact skew part.
    Q = (H @ D - (H @ D).T) / 2 + E / 2
    return ExtendedFirst(x, H, Q, E, r_left, r_right)


def build_lgl_op(p: int) -> FirstDerivOp:
    """Legendre-Gauss-Lobatto collocation operator with ``p + 1`` nodes."""
    return _collocation_op(p, lobatto=True)


def build_lg_op(p: int) -> FirstDerivOp:
    """Legendre-Gauss collocation operator; the boundary rows interpolate."""
    return _collocation_op(p, lobatto=False)


# --------------------------------------------------------------------------
# classical finite-difference operators


def one_sided_first_weights(p: int) -> np.ndarray:
    """Forward first-derivative weights on ``p + 2`` unit-spaced points, exact to degree p+1."""
    return closure(p).one_sided.copy()


def _banded_toeplitz(n: int, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Toeplitz matrix with ``lower[k]`` on diagonal ``-k`` and ``upper[k]`` on ``+k``."""
    out = np.zeros((n, n), dtype=lower.dtype)
    idx = np.arange(n)
    out[idx, idx] = lower[0]
    for k in range(1, min(lower.size, n)):
        out[idx[k:], idx[:-k]] = lower[k]
    for k in range(1, min(upper.size, n)):
        out[idx[:-k], idx[k:]] = upper[k]
    return out


def _csbp_min_nodes(p: int) -> int:
    return max(4 * p + 1, 2 * CLOSURE_SIZE[p] + 1)


def _check_csbp_args(p: int, n: int) -> None:
    if p not in CSBP_DEGREES:
        raise InvalidInputError(f"csbp operators support degrees {CSBP_DEGREES}, got {p}")
    if not isinstance(n, (int, np.integer)) or n < _csbp_min_nodes(p):
        raise InvalidInputError(f"csbp degree {p} needs at least {_csbp_min_nodes(p)} nodes, got {n}")


def _csbp_d1_matrices(p: int, n: int, dtype) -> ExtendedFirst:
    cl = closure(p, dtype)
    a = np.concatenate(([dtype(0)], cl.central_first))
    Q = _banded_toeplitz(n, -a, a)
    r = cl.norm.size
    Q[:r, :r] = cl.q_block
    Q[n - r:, n - r:] = -cl.q_block[::-1, ::-1]
    E = np.zeros((n, n), dtype=dtype)
    E[0, 0], E[-1, -1] = -1, 1
    r_left, r_right = np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype)
    r_left[0], r_right[-1] = 1, 1
    norm = np.ones(n, dtype=dtype)
    norm[:r] = cl.norm
    norm[n - r:] = cl.norm[::-1]
    x = np.arange(n, dtype=dtype) / (n - 1)
    return ExtendedFirst(x, np.diag(norm / (n - 1)), Q, E, r_left, r_right)


def build_csbp_d1(p: int, n: int) -> FirstDerivOp:
    """Diagonal-norm finite-difference SBP operator on ``n`` uniform nodes."""
    _check_csbp_args(p, n)
    m = _csbp_d1_matrices(p, n, np.float64)
    nodes = NodeSet(np.linspace(0.0, 1.0, n), True, True)
    return FirstDerivOp(p, nodes, m.H, m.Q, m.E, m.R_left, m.R_right, "csbp",
                        _csbp_d1_matrices(p, n, EXTENDED))


def make_db_invertible(d_b_raw: np.ndarray, p: int, nodes: NodeSet) -> np.ndarray:
    """Identity with first and last rows replaced by one-sided derivatives.

    ``d_b_raw`` supplies the boundary rows when given (any rows other than the
    first and last are ignored); pass ``None`` to build the minimal
    ``p + 2``-point stencils of degree ``p + 1`` for uniform nodes.
    """
    if not (nodes.includes_left_boundary and nodes.includes_right_boundary):
        raise InvalidInputError("boundary-row construction needs nodes on both boundaries")
    n = len(nodes)
    d_b = np.eye(n)
    if d_b_raw is None:
        h = nodes.points[1] - nodes.points[0]
        if not np.allclose(np.diff(nodes.points), h, rtol=1e-12, atol=0):
            raise InvalidInputError("default one-sided rows need uniform nodes")
        if n < p + 2:
            raise ConstructionError(f"{n} nodes cannot hold a {p + 2}-point one-sided stencil")
        w = one_sided_first_weights(p) / h
        d_b[0, :p + 2] = w
        d_b[-1, n - p - 2:] = -w[::-1]
    else:
        raw = np.asarray(d_b_raw, dtype=float)
        d_b[0], d_b[-1] = raw[0], raw[-1]
    s = np.linalg.svd(d_b, compute_uv=False)
    if s[-1] <= 1e-10 * s[0]:
        raise ConstructionError(f"boundary-derivative matrix is singular (sigma_min={s[-1]:.3e})")
    return d_b


def recover_M(d2, H, E, Lambda, D_b) -> np.ndarray:
    """``M = -H D2 + E Lambda D_b``."""
    d2, H, E, D_b = (np.asarray(a, dtype=float) for a in (d2, H, E, D_b))
    lam = _as_diag(Lambda, d2.shape[0])
    shapes = {d2.shape, H.shape, E.shape, D_b.shape}
    if len(shapes) != 1 or d2.shape[0] != d2.shape[1]:
        raise InvalidInputError(f"non-conformal operator matrices: {sorted(shapes)}")
    return -H @ d2 + E @ (lam[:, None] * D_b)


def _as_diag(Lambda, n: int) -> np.ndarray:
    lam = np.asarray(Lambda, dtype=float)
    if lam.ndim == 2:
        lam = np.diag(lam)
    if lam.shape != (n,):
        raise InvalidInputError(f"diffusivity has {lam.size} values for {n} nodes")
    return lam


def compute_V(M, D_b, rel_tol: float = PINV_REL_TOL) -> tuple[np.ndarray, np.ndarray]:
    """``V = D_b^{-T} (M + M^T) D_b^{-1}`` and its pseudoinverse."""
    M, D_b = np.asarray(M, dtype=float), np.asarray(D_b, dtype=float)
    s = np.linalg.svd(D_b, compute_uv=False)
    if s[-1] <= 1e-10 * s[0]:
        raise InvalidInputError(f"D_b is singular (sigma_min={s[-1]:.3e})")
    d_b_inv = np.linalg.inv(D_b)
    V = d_b_inv.T @ (M + M.T) @ d_b_inv
    V = 0.5 * (V + V.T)
    return V, pseudoinverse(V, rel_tol)


def _wide_V(H: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    V = H * lam[None, :] + lam[:, None] * H
    return V, np.linalg.inv(V)


def _wide_matrices(D: np.ndarray, H: np.ndarray, lam: np.ndarray) -> ExtendedSecond:
    D2 = D @ (lam[:, None] * D)
    M = D.T @ H @ (lam[:, None] * D)
    return ExtendedSecond(D2, D.copy(), (M + M.T) / 2, lam)


def build_wide_d2(d1: FirstDerivOp, Lambda=None) -> SecondDerivOp:
    """Wide second derivative ``D Lambda D``; ``Lambda`` defaults to ones."""
    lam = np.ones(d1.n) if Lambda is None else np.asarray(Lambda, dtype=float)
    if lam.shape != (d1.n,):
        raise InvalidInputError(f"diffusivity has {lam.size} values for {d1.n} nodes")
    if not np.all(lam > 0):
        raise InvalidInputError("diffusivity must be strictly positive")
    m = _wide_matrices(d1.D, d1.H, lam)
    ext = None
    if d1.extended is not None:
        ext = _wide_matrices(d1.extended.D, d1.extended.H, lam.astype(EXTENDED))
    V, V_pinv = _wide_V(d1.H, lam)
    return SecondDerivOp(d1, m.D2, m.D_b, m.M, V, V_pinv, "wide", lam, ext)


def build_csbp_narrow_d2(p: int, n: int, rel_tol: float = PINV_REL_TOL) -> SecondDerivOp:
    """Compact second derivative of degree ``p + 1`` paired with ``build_csbp_d1(p, n)``."""
    _check_csbp_args(p, n)
    d1 = build_csbp_d1(p, n)
    m = _csbp_narrow_matrices(p, n, np.float64)
    D_b = make_db_invertible(None, p, d1.nodes)
    V, V_pinv = compute_V(m.M, D_b, rel_tol)
    return SecondDerivOp(d1, m.D2, D_b, m.M, V, V_pinv, "narrow", np.ones(n),
                         _csbp_narrow_matrices(p, n, EXTENDED))


def _csbp_narrow_matrices(p: int, n: int, dtype) -> ExtendedSecond:
    cl = closure(p, dtype)
    r = cl.norm.size
    c = cl.central_second
    M_unit = -_banded_toeplitz(n, c, c)
    M_unit[:r, :r] = cl.m_block
    M_unit[n - r:, n - r:] = cl.m_block[::-1, ::-1]
    D2_unit = _banded_toeplitz(n, c, c)
    width = cl.d2_rows.shape[1]
    D2_unit[:r, :] = 0
    D2_unit[:r, :width] = cl.d2_rows
    D2_unit[n - r:, :] = 0
    D2_unit[n - r:, n - width:] = cl.d2_rows[::-1, ::-1]
    scale = dtype(n - 1)
    D_b = np.eye(n, dtype=dtype)
    D_b[0, :p + 2] = cl.one_sided * scale
    D_b[-1, n - p - 2:] = -cl.one_sided[::-1] * scale
    return ExtendedSecond(D2_unit * scale**2, D_b, M_unit * scale, np.ones(n, dtype=dtype))


DEFAULT_CSBP_NODES = 20


def build_second_deriv(family: str, p: int, n: int | None = None, stencil: Stencil = "narrow",
                       rel_tol: float = PINV_REL_TOL) -> SecondDerivOp:
    """Convenience dispatcher used by the mesh, study and CLI layers.

    ``n`` defaults to 20 for ``csbp``; collocation families fix ``n = p + 1``.
    """
    if stencil not in ("wide", "narrow"):
        raise InvalidInputError(f"unknown stencil {stencil!r}")
    if family == "csbp":
        n = DEFAULT_CSBP_NODES if n is None else n
        if stencil == "narrow":
            return build_csbp_narrow_d2(p, n, rel_tol)
        return build_wide_d2(build_csbp_d1(p, n))
    if family in ("lgl", "lg"):
        if stencil != "wide":
            raise InvalidInputError(f"{family} operators are available with the wide stencil only")
        if n is not None and n != p + 1:
            raise InvalidInputError(f"{family} degree {p} has {p + 1} nodes, not {n}")
        d1 = build_lgl_op(p) if family == "lgl" else build_lg_op(p)
        return build_wide_d2(d1)
    raise InvalidInputError(f"unknown operator family {family!r}")


# --------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    residual: float
    tolerance: float


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple[Check, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __add__(self, other: "VerificationReport") -> "VerificationReport":
        return VerificationReport(self.checks + other.checks)

    def format(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"{status}  {c.name:<22} residual={c.residual:.3e}  tol={c.tolerance:.1e}")
        return "\n".join(lines)


def _check(name: str, residual: float, tol: float) -> Check:
    return Check(name, bool(np.isfinite(residual) and residual <= tol), float(residual), float(tol))


def _monomial_residual(apply: np.ndarray, x: np.ndarray, degrees: Iterable[int], order: int) -> float:
    worst = 0.0
    for j in degrees:
        exact = math.perm(j, order) * x ** (j - order) if j >= order else np.zeros_like(x)
        worst = max(worst, max_abs(apply @ x**j - exact))
    return worst


def verify_first_deriv(op: FirstDerivOp, accuracy_slack: int = 0) -> VerificationReport:
    """Check the SBP definition; ``accuracy_slack`` lowers the tested degree."""
    x, H = op.x, op.H
    top = max(op.degree - accuracy_slack, 0)
    h_scale = max_abs(H)
    asym = max_abs(H - H.T)
    min_eig = float(symmetric_eigenvalues(H)[0])
    spd_residual = asym / h_scale if min_eig > 0 else max(asym / h_scale, 1.0 - min_eig / h_scale)
    q_scale = max(1.0, max_abs(op.Q))
    extrapolation = max(
        max(abs(op.R_left @ x**j - (1.0 if j == 0 else 0.0)), abs(op.R_right @ x**j - 1.0))
        for j in range(top + 1)
    )
    return VerificationReport((
        _check("accuracy", _monomial_residual(op.D, x, range(top + 1), 1), 1e-10),
        _check("H_spd", spd_residual, 1e-12),
        _check("sbp_Q_plus_QT", max_abs(op.Q + op.Q.T - op.E) / q_scale, 1e-12),
        _check("E_boundary_form",
               max_abs(op.E - np.outer(op.R_right, op.R_right) + np.outer(op.R_left, op.R_left)),
               1e-12),
        _check("extrapolation", extrapolation, 1e-10),
    ))


def narrow_decomposition_residual(op: SecondDerivOp) -> float:
    """Entrywise residual of the identity relating D2 to its H-adjoint."""
    base = op.base
    H_inv = np.linalg.inv(base.H)
    d_r = (base.R_right * op.Lambda) @ op.D_b
    d_l = -(base.R_left * op.Lambda) @ op.D_b
    rhs = H_inv @ (
        op.D2.T @ base.H
        - np.outer(d_r, base.R_right) - np.outer(d_l, base.R_left)
        + np.outer(base.R_right, d_r) + np.outer(base.R_left, d_l)
        - (op.M - op.M.T)
    )
    return max_abs(op.D2 - rhs) / max(1.0, max_abs(op.D2))


def verify_second_deriv(op: SecondDerivOp, accuracy_slack: int = 0,
                        rel_tol: float = PINV_REL_TOL) -> VerificationReport:
    base, n = op.base, op.n
    x, lam = base.x, op.Lambda
    d2_scale = max(1.0, max_abs(op.D2))
    m_scale = max(1.0, max_abs(op.M))
    checks = []
    if op.stencil == "narrow":
        top = op.degree + 1 - accuracy_slack
        checks.append(_check("accuracy", _monomial_residual(op.D2, x, range(top + 1), 2) / d2_scale, 1e-12))
    elif op.constant_diffusivity:
        top = op.degree - accuracy_slack
        checks.append(_check("accuracy",
                             _monomial_residual(op.D2 / lam[0], x, range(top + 1), 2) / d2_scale, 1e-12))
    else:
        checks.append(_check("accuracy", max_abs(op.D2 - base.D @ (lam[:, None] * base.D)) / d2_scale, 1e-12))
    decomposition = base.H @ op.D2 + op.M - base.E @ (lam[:, None] * op.D_b)
    checks.append(_check("decomposition", max_abs(decomposition) / m_scale, 1e-11))
    null = max_abs(op.D2 @ np.ones(n))
    if op.constant_diffusivity:
        null = max(null, max_abs(op.D2 @ x))
        s = np.linalg.svd(op.D2, compute_uv=False)
        rank = int(np.sum(s > 1e-10 * max(s[0], d2_scale)))
        checks.append(_check("rank_n_minus_2", float(abs(rank - (n - 2))), 0.0))
    checks.append(_check("nullspace", null / d2_scale, 1e-10))
    checks.append(_check("decomposition_identity", narrow_decomposition_residual(op), 1e-11))
    sym_min = float(symmetric_eigenvalues(op.M + op.M.T)[0])
    checks.append(_check("M_psd", max(0.0, -sym_min) / m_scale, 1e-12))
    checks.append(_check("M_rowsum", max_abs(op.M @ np.ones(n)) / m_scale, 1e-11))
    if op.stencil == "narrow":
        s = np.linalg.svd(op.D_b, compute_uv=False)
        checks.append(_check("D_b_invertible", 0.0 if s[-1] > 1e-10 * s[0] else 1.0, 0.0))
        v0 = op.D_b @ np.ones(n)
        v_scale = max(1e-300, max_abs(op.V))
        checks.append(_check("V_nullspace", max_abs(op.V @ v0) / (v_scale * max(1.0, max_abs(v0))), 1e-10))
        if op.constant_diffusivity:
            sv = np.linalg.svd(op.V, compute_uv=False)
            small = int(np.sum(sv < rel_tol * sv[0]))
            checks.append(_check("V_rank_n_minus_1", float(abs(small - 1)), 0.0))
    return VerificationReport(tuple(checks))


# --------------------------------------------------------------------------
# element mapping


def _extended_parts(op: SecondDerivOp) -> tuple[ExtendedFirst, ExtendedSecond, np.ndarray]:
    """Long-double matrices of ``op`` and ``D``; plain casts when no exact copy exists."""
    base = op.base
    if base.extended is not None and op.extended is not None:
        return base.extended, op.extended, base.extended.D
    cast = lambda m: np.asarray(m, dtype=EXTENDED)  # noqa: E731
    first = ExtendedFirst(*(cast(m) for m in (base.x, base.H, base.Q, base.E, base.R_left, base.R_right)))
    second = ExtendedSecond(*(cast(m) for m in (op.D2, op.D_b, op.M, op.Lambda)))
    return first, second, cast(base.D)


def map_to_element(op: SecondDerivOp, x_left: float, x_right: float,
                   precision: Precision = "double") -> ElementOp:
    """Affinely map the reference operator onto ``[x_left, x_right]``."""
    if not (np.isfinite(x_left) and np.isfinite(x_right)) or x_right <= x_left:
        raise InvalidInputError(f"degenerate element [{x_left}, {x_right}]")
    h = float(x_right - x_left)
    if precision == "double":
        base, D = op.base, op.base.D
        x, H, E, R_left, R_right = base.x, base.H, base.E, base.R_left, base.R_right
        D2, D_b, M, lam = op.D2, op.D_b, op.M, op.Lambda
        scale, start = h, float(x_left)
    elif precision == "extended":
        first, second, D = _extended_parts(op)
        x, H, E, R_left, R_right = first.x, first.H, first.E, first.R_left, first.R_right
        D2, D_b, M, lam = second.D2, second.D_b, second.M, second.Lambda
        scale, start = EXTENDED(x_right) - EXTENDED(x_left), EXTENDED(x_left)
    else:
        raise InvalidInputError(f"unknown precision {precision!r}")
    return ElementOp(
        reference=op, x_left=float(x_left), x_right=float(x_right), h=h,
        x=start + scale * x,
        H=scale * H, D=D / scale, D2=D2 / scale**2, D_b=D_b / scale, M=M / scale,
        V=h * op.V, V_pinv=op.V_pinv / h, E=E,
        R_left=R_left, R_right=R_right, Lambda=lam,
    )


# --------------------------------------------------------------------------
# operator files

_SECTIONS = ("nodes", "H", "Q", "E", "Rl", "Rr", "D2", "Db")
_VECTOR_SECTIONS = {"nodes", "Rl", "Rr"}


def dumps_operator(op: SecondDerivOp) -> str:
    base = op.base
    fmt = lambda row: " ".join(f"{v:.17e}" for v in np.atleast_1d(row))  # noqa: E731
    out = [f"sbp-op v1 {base.family} degree={base.degree} n={base.n} stencil={op.stencil}"]
    data = {"nodes": base.x, "H": base.H, "Q": base.Q, "E": base.E, "Rl": base.R_left,
            "Rr": base.R_right, "D2": op.D2, "Db": op.D_b}
    for name in _SECTIONS:
        out.append(name)
        value = data[name]
        rows = [value] if name in _VECTOR_SECTIONS else value
        out.extend(fmt(row) for row in rows)
        out.append("end")
    return "\n".join(out) + "\n"


def save_operator(op: SecondDerivOp, path) -> None:
    Path(path).write_text(dumps_operator(op))


def _parse_header(line: str, lineno: int) -> tuple[str, int, int, str]:
    parts = line.split()
    if len(parts) != 6 or parts[:2] != ["sbp-op", "v1"]:
        raise ParseError("expected header 'sbp-op v1 <family> degree=<p> n=<n> stencil=<s>'", lineno)
    family = parts[2]
    fields = {}
    for token in parts[3:]:
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseError(f"malformed header field {token!r}", lineno)
        fields[key] = value
    try:
        degree, n = int(fields["degree"]), int(fields["n"])
        stencil = fields["stencil"]
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad header field: {exc}", lineno) from None
    if stencil not in ("wide", "narrow"):
        raise ParseError(f"unknown stencil {stencil!r}", lineno)
    if family not in ("csbp", "lgl", "lg", "external"):
        family = "external"
    return family, degree, n, stencil


def parse_operator_text(text: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse the operator file format into a header dict and named arrays."""
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise ParseError("empty operator file", 1)
    family, degree, n, stencil = _parse_header(lines[0][1], lines[0][0])
    header = {"family": family, "degree": degree, "n": n, "stencil": stencil}
    sections: dict[str, np.ndarray] = {}
    pos = 1
    while pos < len(lines):
        lineno, name = lines[pos]
        if name not in _SECTIONS:
            raise ParseError(f"unknown section {name!r}", lineno)
        if name in sections:
            raise ParseError(f"duplicate section {name!r}", lineno)
        width = n
        expected_rows = 1 if name in _VECTOR_SECTIONS else n
        rows = []
        pos += 1
        while True:
            if pos >= len(lines):
                raise ParseError(f"section {name!r} is missing 'end'", lineno)
            row_no, content = lines[pos]
            pos += 1
            if content == "end":
                break
            try:
                values = [float(tok) for tok in content.split()]
            except ValueError:
                raise ParseError(f"non-numeric entry in section {name!r}", row_no) from None
            if len(values) != width:
                raise ParseError(f"section {name!r} row has {len(values)} entries, expected {width}", row_no)
            rows.append(values)
        if len(rows) != expected_rows:
            raise ParseError(f"section {name!r} has {len(rows)} rows, expected {expected_rows}", row_no)
        arr = np.array(rows, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ParseError(f"section {name!r} has non-finite entries", lineno)
        sections[name] = arr[0] if name in _VECTOR_SECTIONS else arr
    missing = [s for s in _SECTIONS if s not in sections]
    if missing:
        raise ParseError(f"missing sections: {', '.join(missing)}", lines[-1][0])
    return header, sections


def parse_operator(text: str, rel_tol: float = PINV_REL_TOL) -> SecondDerivOp:
    """Build an operator from file text without running the verification checks.

    Raises VerificationError only when ``V`` cannot be formed (singular ``D_b``).
    """
    header, s = parse_operator_text(text)
    try:
        nodes = NodeSet.from_points(s["nodes"])
    except InvalidInputError as exc:
        raise ParseError(f"invalid nodes: {exc}") from None
    d1 = FirstDerivOp(header["degree"], nodes, s["H"], s["Q"], s["E"], s["Rl"], s["Rr"], header["family"])
    lam = np.ones(d1.n)
    M = recover_M(s["D2"], d1.H, d1.E, lam, s["Db"])
    try:
        if header["stencil"] == "narrow":
            V, V_pinv = compute_V(M, s["Db"], rel_tol)
        else:
            V, V_pinv = _wide_V(d1.H, lam)
    except InvalidInputError as exc:
        raise VerificationError(str(exc), ["D_b_invertible"]) from None
    return SecondDerivOp(d1, s["D2"], s["Db"], M, V, V_pinv, header["stencil"], lam)


def loads_operator(text: str, accuracy_slack: int = 0,
                   rel_tol: float = PINV_REL_TOL) -> SecondDerivOp:
    """Parse and verify; any failed check raises VerificationError."""
    op = parse_operator(text, rel_tol)
    report = verify_first_deriv(op.base, accuracy_slack)
    if not report.passed:
        raise VerificationError("first-derivative checks failed: " + ", ".join(report.failed()),
                                [f"d1.{name}" for name in report.failed()])
    report = verify_second_deriv(op, accuracy_slack, rel_tol)
    if not report.passed:
        raise VerificationError("second-derivative checks failed: " + ", ".join(report.failed()),
                                [f"d2.{name}" for name in report.failed()])
    return op


def load_external_operator(path, accuracy_slack: int = 0,
                           rel_tol: float = PINV_REL_TOL) -> SecondDerivOp:
    """Read, reconstruct and verify an operator file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    return loads_operator(text, accuracy_slack, rel_tol)
