"""Global steady primal and adjoint systems for ``-(lambda u')' = f`` on a 1D mesh.

Every element is a copy of one reference operator mapped onto its interval.
Interfaces and boundaries are coupled weakly through the penalties of a
:class:`~sbp_sat_lab.sats.SatFamily`. A mesh built with ``precision="extended"``
assembles long-double systems, which the solver then refines to that accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import InvalidInputError
from .numerics import max_abs, solve_dense, symmetric_eigenvalues
from .operators import ElementOp, Precision, SecondDerivOp, build_wide_d2, map_to_element
from .sats import InterfaceContext, SatCoeffs, SatFamily

Side = Literal["left", "right"]
SourceFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Mesh1D:
    a: float
    b: float
    boundaries: np.ndarray
    elements: tuple[ElementOp, ...]

    def __post_init__(self):
        edges = np.asarray(self.boundaries, dtype=float)
        if edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise InvalidInputError("element boundaries must be strictly ascending")
        if not (np.isclose(edges[0], self.a) and np.isclose(edges[-1], self.b)):
            raise InvalidInputError("element boundaries must cover the domain")
        if len(self.elements) != edges.size - 1:
            raise InvalidInputError("one element operator is needed per interval")
        if len({e.n for e in self.elements}) != 1:
            raise InvalidInputError("every element must carry the same number of nodes")

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def nodes_per_element(self) -> int:
        return self.elements[0].n

    @property
    def dof(self) -> int:
        return self.n_elements * self.nodes_per_element

    @property
    def dtype(self) -> np.dtype:
        return self.elements[0].H.dtype

    @property
    def precision(self) -> Precision:
        return self.elements[0].precision

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([e.x for e in self.elements])

    @property
    def H(self) -> np.ndarray:
        n = self.nodes_per_element
        out = np.zeros((self.dof, self.dof), dtype=self.dtype)
        for i, e in enumerate(self.elements):
            out[i * n:(i + 1) * n, i * n:(i + 1) * n] = e.H
        return out

    def block(self, i: int) -> slice:
        n = self.nodes_per_element
        return slice(i * n, (i + 1) * n)

    def interfaces(self) -> list[InterfaceContext]:
        return [InterfaceContext(self.elements[i], self.elements[i + 1])
                for i in range(self.n_elements - 1)]


def mesh_from_boundaries(op: SecondDerivOp, boundaries, diffusivity: SourceFn | None = None,
                         precision: Precision = "double") -> Mesh1D:
    """Map ``op`` onto every interval of ``boundaries``.

    A variable ``diffusivity`` rebuilds the wide operator with the nodal
    values of each element; narrow operators only support constant one.
    """
    edges = np.asarray(boundaries, dtype=float)
    elements = []
    for left, right in zip(edges[:-1], edges[1:]):
        ref = op
        if diffusivity is not None:
            if op.stencil != "wide":
                raise InvalidInputError("variable diffusivity needs a wide-stencil operator")
            lam = np.asarray(diffusivity(left + (right - left) * op.base.x), dtype=float)
            ref = build_wide_d2(op.base, lam)
        elements.append(map_to_element(ref, left, right, precision))
    return Mesh1D(float(edges[0]), float(edges[-1]), edges, tuple(elements))


def uniform_mesh(op: SecondDerivOp, n_elements: int, a: float = 0.0, b: float = 1.0,
                 diffusivity: SourceFn | None = None, precision: Precision = "double") -> Mesh1D:
    if n_elements < 1:
        raise InvalidInputError(f"need at least one element, got {n_elements}")
    return mesh_from_boundaries(op, np.linspace(a, b, n_elements + 1), diffusivity, precision)


@dataclass(frozen=True)
class BoundaryCondition:
    """A boundary datum; numpy scalars (e.g. long double) are kept as given."""

    kind: Literal["dirichlet", "neumann"]
    value: float

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise InvalidInputError(f"unknown boundary condition kind {self.kind!r}")
        if not np.isfinite(self.value):
            raise InvalidInputError("boundary value must be finite")


def _scalar(value):
    return value if isinstance(value, np.floating) else float(value)


def dirichlet(value: float) -> BoundaryCondition:
    return BoundaryCondition("dirichlet", _scalar(value))


def neumann(value: float) -> BoundaryCondition:
    """Prescribed outward flux ``lambda du/dn``."""
    return BoundaryCondition("neumann", _scalar(value))


@dataclass(frozen=True)
class BoundarySpec:
    left: BoundaryCondition
    right: BoundaryCondition

    def __post_init__(self):
        if "dirichlet" not in (self.left.kind, self.right.kind):
            raise InvalidInputError("at least one boundary must carry a Dirichlet condition")

    def side(self, side: Side) -> BoundaryCondition:
        return self.left if side == "left" else self.right


@dataclass(frozen=True)
class FunctionalSpec:
    """Functional ``int g u dx`` plus boundary terms weighted by the adjoint data.

    ``psi_D`` weights the flux on every Dirichlet side and ``psi_N`` the
    value on the Neumann side; they are also the adjoint boundary data.
    """

    g: SourceFn
    psi_D: float = 0.0
    psi_N: float = 0.0
    exact_value: float | None = None

    def adjoint_bc(self, bc: BoundarySpec) -> BoundarySpec:
        def weight(cond: BoundaryCondition) -> BoundaryCondition:
            return BoundaryCondition(cond.kind, self.psi_D if cond.kind == "dirichlet" else self.psi_N)
        return BoundarySpec(weight(bc.left), weight(bc.right))


@dataclass(frozen=True, eq=False)
class GlobalSystem:
    A_global: np.ndarray
    rhs: np.ndarray
    H_global: np.ndarray
    kind: Literal["primal", "adjoint"]

    @property
    def HA(self) -> np.ndarray:
        return self.H_global @ self.A_global


def _as_family(sat_family) -> SatFamily:
    return sat_family if isinstance(sat_family, SatFamily) else SatFamily(str(sat_family))


def _boundary_faces(mesh: Mesh1D) -> list[tuple[Side, int]]:
    return [("left", 0), ("right", mesh.n_elements - 1)]


def _add_interface_primal(L: np.ndarray, mesh: Mesh1D, i: int, c: SatCoeffs) -> None:
    ctx = InterfaceContext(mesh.elements[i], mesh.elements[i + 1])
    own = (mesh.block(i), ctx.R_k, ctx.D_k)
    other = (mesh.block(i + 1), ctx.R_v, ctx.D_v)
    for (blk, R, D), (oblk, oR, oD), cc in ((own, other, c), (other, own, c.swapped())):
        jump_row = cc.T1_k * R + cc.T2_k * D
        flux_row = cc.T3_k * R + cc.T4_k * D
        L[blk, blk] += np.outer(jump_row, R) + np.outer(flux_row, D)
        L[blk, oblk] += -np.outer(jump_row, oR) + np.outer(flux_row, oD)


def _add_interface_adjoint(L: np.ndarray, mesh: Mesh1D, i: int, c: SatCoeffs) -> None:
    ctx = InterfaceContext(mesh.elements[i], mesh.elements[i + 1])
    own = (mesh.block(i), ctx.R_k, ctx.D_k)
    other = (mesh.block(i + 1), ctx.R_v, ctx.D_v)
    for (blk, R, D), (oblk, oR, oD), cc in ((own, other, c), (other, own, c.swapped())):
        # rows [R; D] times the coefficient table acting on [R psi, R_o psi_o, D psi, D_o psi_o]
        L[blk, blk] += (np.outer(R, cc.T1_k * R + (cc.T2_k + 1.0) * D)
                        + np.outer(D, (cc.T3_k - 1.0) * R + cc.T4_k * D))
        L[blk, oblk] += (np.outer(R, -cc.T1_v * oR - cc.T2_v * oD)
                         + np.outer(D, cc.T3_v * oR + cc.T4_v * oD))


def _add_boundaries(L: np.ndarray, data: np.ndarray, mesh: Mesh1D, bc: BoundarySpec,
                    family: SatFamily) -> None:
    for side, idx in _boundary_faces(mesh):
        elem, blk = mesh.elements[idx], mesh.block(idx)
        cond = bc.side(side)
        R, D = elem.face_row(side), elem.normal_derivative(side)
        if cond.kind == "dirichlet":
            lift = family.dirichlet(elem, side).TD * R - D
            L[blk, blk] += np.outer(lift, R)
            data[blk] += lift * cond.value
        else:
            L[blk, blk] += np.outer(R, D)
            data[blk] += R * cond.value


def _finish(mesh: Mesh1D, volume: np.ndarray, L: np.ndarray, source: np.ndarray, data: np.ndarray,
            kind: Literal["primal", "adjoint"]) -> GlobalSystem:
    """``A = volume + H^{-1} L`` and ``rhs = source + H^{-1} data`` block by block."""
    A = volume.copy()
    rhs = source.copy()
    for i, e in enumerate(mesh.elements):
        blk = mesh.block(i)
        A[blk] += _apply_inverse(e.H, L[blk])
        rhs[blk] += _apply_inverse(e.H, data[blk])
    return GlobalSystem(A, rhs, mesh.H, kind)


def _apply_inverse(H: np.ndarray, rows: np.ndarray) -> np.ndarray:
    d = np.diag(H)
    if np.array_equal(H, np.diag(d)):
        return rows / (d[:, None] if rows.ndim == 2 else d)
    return np.linalg.solve(np.asarray(H, dtype=float), np.asarray(rows, dtype=float))


def _empty(mesh: Mesh1D) -> tuple[np.ndarray, np.ndarray]:
    shape = (mesh.dof, mesh.dof)
    return np.zeros(shape, dtype=mesh.dtype), np.zeros(shape, dtype=mesh.dtype)


def _sample(fn: SourceFn, x: np.ndarray) -> np.ndarray:
    values = np.broadcast_to(np.asarray(fn(x)), x.shape)
    return np.array(values, dtype=x.dtype)


def assemble_primal(mesh: Mesh1D, bc: BoundarySpec, sat_family, f: SourceFn) -> GlobalSystem:
    """Steady system ``A u = rhs`` whose rows read ``-D2 u + H^{-1}(SATs) = f``."""
    family = _as_family(sat_family)
    volume, L = _empty(mesh)
    data = np.zeros(mesh.dof, dtype=mesh.dtype)
    for i, e in enumerate(mesh.elements):
        volume[mesh.block(i), mesh.block(i)] = -e.D2
    for i, ctx in enumerate(mesh.interfaces()):
        _add_interface_primal(L, mesh, i, family.interface(ctx))
    _add_boundaries(L, data, mesh, bc, family)
    return _finish(mesh, volume, L, _sample(f, mesh.x), data, "primal")


def assemble_adjoint(mesh: Mesh1D, bc: BoundarySpec, sat_family, g: SourceFn,
                     psi_D: float = 0.0, psi_N: float = 0.0) -> GlobalSystem:
    """Discrete adjoint system ``L*(psi) = g`` with the primal boundary kinds."""
    family = _as_family(sat_family)
    adjoint_bc = FunctionalSpec(g, psi_D, psi_N).adjoint_bc(bc)
    volume, L = _empty(mesh)
    data = np.zeros(mesh.dof, dtype=mesh.dtype)
    for i, e in enumerate(mesh.elements):
        volume[mesh.block(i), mesh.block(i)] = -e.D2
        L[mesh.block(i), mesh.block(i)] = -(e.M - e.M.T)
    for i, ctx in enumerate(mesh.interfaces()):
        _add_interface_adjoint(L, mesh, i, family.interface(ctx))
    _add_boundaries(L, data, mesh, adjoint_bc, family)
    return _finish(mesh, volume, L, _sample(g, mesh.x), data, "adjoint")


def solve_system(sys: GlobalSystem) -> np.ndarray:
    return solve_dense(sys.A_global, sys.rhs)


def energy_check(sys: GlobalSystem) -> float:
    """Largest eigenvalue of the symmetric part of ``-H A``.

    The semi-discretisation ``du/dt = -A u`` is energy stable exactly when
    this value is nonpositive (up to rounding).
    """
    if sys.kind != "primal":
        raise InvalidInputError("the energy check applies to primal systems")
    return float(symmetric_eigenvalues(-np.asarray(sys.HA, dtype=float))[-1])


def energy_tolerance(sys: GlobalSystem, rel: float = 1e-8) -> float:
    return rel * max_abs(sys.HA)


def discrete_functional(u_h: np.ndarray, mesh: Mesh1D, spec: FunctionalSpec, sat_family,
                        which: Literal["primal", "adjoint"], bc: BoundarySpec,
                        f: SourceFn | None = None) -> float:
    """Discrete functional evaluated from a primal solution or from an adjoint one.

    The adjoint form weights the source ``f`` (required) by ``psi_h`` and
    swaps the roles of primal and adjoint boundary data. The sum is carried
    in the mesh precision.
    """
    family = _as_family(sat_family)
    u_h = np.asarray(u_h, dtype=mesh.dtype)
    if u_h.shape != (mesh.dof,):
        raise InvalidInputError(f"solution has {u_h.size} entries, mesh has {mesh.dof} dof")
    adjoint_bc = spec.adjoint_bc(bc)
    if which == "primal":
        weights, data_bc, weight_bc = _sample(spec.g, mesh.x), bc, adjoint_bc
    elif which == "adjoint":
        if f is None:
            raise InvalidInputError("the adjoint form of the functional needs the primal source f")
        weights, data_bc, weight_bc = _sample(f, mesh.x), adjoint_bc, bc
    else:
        raise InvalidInputError(f"unknown functional form {which!r}")
    total = weights @ (mesh.H @ u_h)
    for side, idx in _boundary_faces(mesh):
        elem = mesh.elements[idx]
        u_e = u_h[mesh.block(idx)]
        own, weight = data_bc.side(side), weight_bc.side(side).value
        R, D = elem.face_row(side), elem.normal_derivative(side)
        if own.kind == "dirichlet":
            td = family.dirichlet(elem, side).TD
            total += weight * (-(D @ u_e) + td * (R @ u_e - own.value))
        else:
            total += weight * (R @ u_e)
    return total if mesh.precision == "extended" else float(total)
