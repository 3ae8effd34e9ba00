"""Exact boundary closures of the diagonal-norm finite-difference operators.

The closures are obtained by solving the polynomial accuracy conditions in
rational arithmetic, so the rounded coefficients satisfy them to the last
bit. All quantities use unit grid spacing; callers scale by ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy as sp

from .errors import ConstructionError

# Boundary-closure block size per degree.
CLOSURE_SIZE = {1: 1, 2: 4, 3: 6, 4: 8}

# First-derivative skew-block entries the accuracy conditions leave free,
# fixed to least-squares minimisers of the next two truncation-error terms.
D1_FREE = {
    3: {(4, 5): "0.7026316"},
    4: {(5, 6): "0.7237859", (5, 7): "-0.1302204", (6, 7): "0.7611571"},
}

# Free entries of the symmetric M correction, chosen by a semidefinite
# program so that M dominates half the Neumann Laplacian while keeping the
# spectral radius of H^{-1} M small.
D2_FREE = {
    3: {(5, 5): "-0.04039"},
    4: {(6, 6): "-0.13207", (6, 7): "0.06884", (7, 7): "-0.02567"},
}


@dataclass(frozen=True)
class Closure:
    """Floating-point images of the exact closure data for one degree."""

    central_first: np.ndarray     # a_1..a_p
    central_second: np.ndarray    # c_0..c_p
    one_sided: np.ndarray         # p + 2 forward weights of degree p + 1
    norm: np.ndarray              # leading r diagonal norm weights
    q_block: np.ndarray           # leading r x r block of Q
    m_block: np.ndarray           # leading r x r block of M
    d2_rows: np.ndarray           # leading r rows of D2, width r + p


def _to_array(m, dtype) -> np.ndarray:
    """Round exact values to ``dtype`` through a decimal string long enough for long double."""
    def conv(v):
        return dtype(str(sp.N(v, 30))) if dtype is not np.float64 else float(v)
    if hasattr(m, "tolist"):
        return np.array([[conv(v) for v in row] for row in m.tolist()], dtype=dtype)
    return np.array([conv(v) for v in m], dtype=dtype)


def _solve_exact(eqs, unknowns, what: str) -> dict:
    A, b = sp.linear_eq_to_matrix(eqs, unknowns)
    try:
        sol, params = A.gauss_jordan_solve(b)
    except ValueError:
        raise ConstructionError(f"{what}: accuracy conditions are inconsistent") from None
    if params.shape[0]:
        raise ConstructionError(f"{what}: accuracy conditions leave {params.shape[0]} entries free")
    return dict(zip(unknowns, sol))


def _central_first(p: int) -> list:
    j = [sp.Integer(i) for i in range(1, p + 1)]
    A = sp.Matrix([[2 * jj**k for jj in j] for k in range(1, 2 * p, 2)])
    b = sp.Matrix([1 if k == 1 else 0 for k in range(1, 2 * p, 2)])
    return list(A.LUsolve(b))


def _central_second(p: int) -> list:
    even = range(0, 2 * p + 1, 2)
    A = sp.Matrix([[1 if k == 0 else 0] + [2 * sp.Integer(j)**k for j in range(1, p + 1)] for k in even])
    b = sp.Matrix([2 if k == 2 else 0 for k in even])
    return list(A.LUsolve(b))


def _one_sided(p: int) -> list:
    A = sp.Matrix([[sp.Integer(j)**k for j in range(p + 2)] for k in range(p + 2)])
    b = sp.Matrix([1 if k == 1 else 0 for k in range(p + 2)])
    return list(A.LUsolve(b))


@lru_cache(maxsize=None)
def closure(p: int, dtype=np.float64) -> Closure:
    """Closure data of degree ``p`` rounded to ``dtype`` (float64 or longdouble)."""
    exact = _exact_closure(p)
    return Closure(**{name: _to_array(value, dtype) for name, value in exact.items()})


@lru_cache(maxsize=None)
def _exact_closure(p: int) -> dict:
    r = CLOSURE_SIZE[p]
    a, c, w = _central_first(p), _central_second(p), _one_sided(p)
    # Enough nodes that the closure rows only see interior entries beyond the block.
    n = r + 3 * p + 4
    x = [sp.Integer(i) for i in range(n)]

    Q = sp.zeros(n, n)
    for i in range(n):
        for j in range(max(0, i - p), min(n, i + p + 1)):
            if i != j:
                Q[i, j] = sp.sign(j - i) * a[abs(j - i) - 1]
    norm = list(sp.symbols(f"h0:{r}"))
    unknowns = list(norm)
    for i in range(r):
        for j in range(i + 1, r):
            fixed = D1_FREE.get(p, {}).get((i, j))
            value = sp.Rational(fixed) if fixed is not None else sp.Symbol(f"q{i}_{j}")
            if fixed is None:
                unknowns.append(value)
            Q[i, j], Q[j, i] = value, -value
    Q[0, 0] = -sp.Rational(1, 2)
    eqs = [sum(Q[i, j] * x[j]**k for j in range(n)) - norm[i] * (k * x[i]**(k - 1) if k else 0)
           for k in range(p + 1) for i in range(r)]
    sol = _solve_exact(eqs, unknowns, f"csbp first derivative p={p}")
    Q = Q.subs(sol)
    norm = [sol[h] for h in norm]

    M = sp.zeros(n, n)
    for i in range(n):
        for j in range(max(0, i - p), min(n, i + p + 1)):
            M[i, j] = -c[abs(j - i)]
    unknowns = []
    for i in range(r):
        for j in range(i, r):
            fixed = D2_FREE.get(p, {}).get((i, j))
            value = sp.Rational(fixed) if fixed is not None else sp.Symbol(f"m{i}_{j}")
            if fixed is None:
                unknowns.append(value)
            M[i, j] += value
            if i != j:
                M[j, i] += value
    boundary_row = [w[j] if j < p + 2 else 0 for j in range(n)]
    eqs = []
    for k in range(p + 2):
        for i in range(r):
            flux = -sum(boundary_row[j] * x[j]**k for j in range(n)) if i == 0 else 0
            second = norm[i] * k * (k - 1) * x[i]**(k - 2) if k >= 2 else 0
            eqs.append(sum(M[i, j] * x[j]**k for j in range(n)) - flux + second)
    sol = _solve_exact(eqs, unknowns, f"csbp narrow second derivative p={p}")
    M = M.subs(sol)

    width = max(r + p, p + 2)
    d2_rows = sp.zeros(r, width)
    for i in range(r):
        for j in range(width):
            flux = -boundary_row[j] if i == 0 else 0
            d2_rows[i, j] = (-M[i, j] + flux) / norm[i]
    return dict(central_first=a, central_second=c, one_sided=w, norm=norm,
                q_block=Q[:r, :r], m_block=M[:r, :r], d2_rows=d2_rows)
