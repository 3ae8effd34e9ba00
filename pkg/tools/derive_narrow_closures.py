"""Offline derivation of the free entries in the narrow second-derivative closures.

The accuracy conditions leave some entries of the symmetric boundary block
of M undetermined at degrees 3 and 4. This script expresses M affinely in
those entries and picks them with a semidefinite program:

    minimise rho  subject to  M >= delta * L  and  M <= rho * H,

where L is the second-order Neumann Laplacian on unit spacing. The
printed values are what ``sbp_sat_lab._csbp_closures.D2_FREE`` embeds.

Requires cvxpy, which is not a runtime dependency of the package:

    python3 tools/derive_narrow_closures.py --delta 0.5
"""

from __future__ import annotations

import argparse

import cvxpy as cp
import numpy as np
import sympy as sp

from sbp_sat_lab import _csbp_closures as closures


def neumann_laplacian(n: int) -> np.ndarray:
    L = 2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)
    L[0, 0] = L[-1, -1] = 1
    return L


def parametric_correction(p: int):
    """Boundary block of the M correction as ``{(i, j): affine expression}`` plus free symbols."""
    r = closures.CLOSURE_SIZE[p]
    exact = closures._exact_closure(p)
    c, w, norm = exact["central_second"], exact["one_sided"], exact["norm"]
    n = r + 3 * p + 4
    x = [sp.Integer(i) for i in range(n)]
    M = sp.zeros(n, n)
    for i in range(n):
        for j in range(max(0, i - p), min(n, i + p + 1)):
            M[i, j] = -c[abs(j - i)]
    entries = {}
    for i in range(r):
        for j in range(i, r):
            entries[(i, j)] = sp.Symbol(f"m{i}_{j}")
            M[i, j] += entries[(i, j)]
            if i != j:
                M[j, i] += entries[(i, j)]
    boundary_row = [w[j] if j < p + 2 else 0 for j in range(n)]
    eqs = []
    for k in range(p + 2):
        for i in range(r):
            flux = -sum(boundary_row[j] * x[j] ** k for j in range(n)) if i == 0 else 0
            second = norm[i] * k * (k - 1) * x[i] ** (k - 2) if k >= 2 else 0
            eqs.append(sum(M[i, j] * x[j] ** k for j in range(n)) - flux + second)
    (sol,) = sp.solve(eqs, list(entries.values()), dict=True)
    free = [s for s in entries.values() if s not in sol]
    block = {key: sp.sympify(sol.get(s, s)) for key, s in entries.items()}
    return block, free, [float(v) for v in norm]


def full_matrices(p: int, n: int, block, free, values):
    """Assembled M on ``n`` unit-spaced nodes for given free values."""
    c = [float(v) for v in closures._exact_closure(p)["central_second"]]
    subs = dict(zip(free, values))
    M = np.zeros((n, n))
    for i in range(n):
        for j in range(max(0, i - p), min(n, i + p + 1)):
            M[i, j] = -c[abs(j - i)]
    for (i, j), expr in block.items():
        v = float(expr.subs(subs))
        for a, b in {(i, j), (j, i)}:
            M[a, b] += v
            M[n - 1 - a, n - 1 - b] += v
    return M


def derive(p: int, n: int, delta: float) -> dict:
    block, free, norm = parametric_correction(p)
    if not free:
        return {}
    M0 = full_matrices(p, n, block, free, [0.0] * len(free))
    basis = [full_matrices(p, n, block, free, np.eye(len(free))[k]) - M0 for k in range(len(free))]
    H = np.ones(n)
    H[:len(norm)] = norm
    H[n - len(norm):] = norm[::-1]
    t, rho = cp.Variable(len(free)), cp.Variable()
    M = M0 + sum(t[k] * basis[k] for k in range(len(free)))
    M_sym = (M + M.T) / 2
    problem = cp.Problem(cp.Minimize(rho), [M_sym - delta * neumann_laplacian(n) >> 0,
                                            rho * np.diag(H) - M_sym >> 0])
    problem.solve(solver=cp.CLARABEL)
    names = {expr: key for key, expr in block.items() if expr in free}
    return {names[s]: float(v) for s, v in zip(free, t.value)}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--delta", type=float, default=0.5, help="coercivity margin against L")
    parser.add_argument("--nodes", type=int, default=40, help="grid used for the SDP")
    args = parser.parse_args()
    for p in (3, 4):
        values = derive(p, args.nodes, args.delta)
        rounded = {key: f"{v:.5f}" for key, v in values.items()}
        print(f"p={p}: derived {rounded}")
        print(f"p={p}: embedded {closures.D2_FREE.get(p, {})}")


if __name__ == "__main__":
    main()
