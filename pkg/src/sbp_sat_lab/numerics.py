"""Dense linear-algebra kernels: pseudoinverse, symmetric eigenvalues,
pivoted solves and a block positive-semidefiniteness test."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg as sla

from .errors import InvalidInputError, SingularSystemError

FailedCondition = Literal["Y22_not_psd", "range_condition", "schur_complement"]

PINV_REL_TOL = 1e-10
PSD_TOL = 1e-10


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a finite 2-D float array or raise InvalidInputError."""
    a = np.asarray(m, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be two-dimensional, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return a


def max_abs(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.max(np.abs(a))) if a.size else 0.0


def pseudoinverse(m, rel_tol: float = PINV_REL_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse by SVD.

    Singular values below ``rel_tol * sigma_max`` are treated as exact zeros.
    """
    if not 0.0 < rel_tol < 1.0:
        raise InvalidInputError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    a = as_matrix(m)
    if a.size == 0:
        return a.T.copy()
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros(a.T.shape)
    keep = s >= rel_tol * s[0]
    inv_s = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (vt.T * inv_s) @ u.T


def symmetric_eigenvalues(m) -> np.ndarray:
    """Ascending eigenvalues of the symmetric part of a square matrix."""
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"matrix must be square, got shape {a.shape}")
    return sla.eigvalsh(0.5 * (a + a.T))


MAX_REFINEMENT_STEPS = 10


def solve_dense(a, b) -> np.ndarray:
    """Solve ``a x = b`` with partial pivoting.

    Raises SingularSystemError when the smallest pivot of the LU factors falls
    below ``1e-14 * ||a||``. Long-double systems are factored in double and
    then refined with long-double residuals until the correction stalls, so
    the answer carries the accuracy of the long-double data.
    """
    extended = np.asarray(a).dtype == np.longdouble
    a_ext = np.asarray(a)
    a = as_matrix(a, "a")
    b_ext = np.asarray(b)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"system matrix must be square, got shape {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise InvalidInputError(f"rhs length {b.shape[0]} does not match matrix size {a.shape[0]}")
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("rhs has non-finite entries")
    with warnings.catch_warnings():
        # singularity is reported below with the pivot size
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    smallest = float(pivots.min()) if pivots.size else 0.0
    scale = max_abs(a)
    if smallest <= 1e-14 * scale or scale == 0.0:
        raise SingularSystemError(
            f"matrix is numerically singular (pivot {smallest:.3e}, scale {scale:.3e})", smallest
        )
    x = sla.lu_solve((lu, piv), b, check_finite=False)
    if not extended:
        return x
    x = x.astype(np.longdouble)
    b_ext = b_ext.astype(np.longdouble)
    previous = np.inf
    for _ in range(MAX_REFINEMENT_STEPS):
        step = sla.lu_solve((lu, piv), (b_ext - a_ext @ x).astype(float), check_finite=False)
        x = x + step
        size = max_abs(step)
        if size <= 4 * np.finfo(np.longdouble).eps * max_abs(x) or size >= previous / 2:
            break
        previous = size
    return x


@dataclass(frozen=True)
class PsdReport:
    is_psd: bool
    min_eigenvalue: float
    failed_condition: FailedCondition | None = None

    def __post_init__(self):
        if self.is_psd and self.failed_condition is not None:
            raise InvalidInputError("a PSD report cannot carry a failed condition")


def psd_schur_test(y11, y12, y22, tol: float = PSD_TOL,
                   rel_tol: float = PINV_REL_TOL) -> PsdReport:
    """Decide whether ``[[y11, y12], [y12^T, y22]]`` is positive semidefinite.

    The three conditions are checked in order: ``y22 >= 0``, the range
    condition ``(I - y22 y22^+) y12^T = 0`` and ``y11 - y12 y22^+ y12^T >= 0``.
    Every threshold is ``tol`` times the largest block magnitude. The reported
    minimum eigenvalue is that of the assembled matrix.
    """
    y11, y12, y22 = as_matrix(y11, "y11"), as_matrix(y12, "y12"), as_matrix(y22, "y22")
    n1, n2 = y11.shape[0], y22.shape[0]
    if y11.shape != (n1, n1) or y22.shape != (n2, n2) or y12.shape != (n1, n2):
        raise InvalidInputError(
            f"non-conformal blocks: y11 {y11.shape}, y12 {y12.shape}, y22 {y22.shape}"
        )
    scale = max(max_abs(y11), max_abs(y12), max_abs(y22))
    full = np.block([[y11, y12], [y12.T, y22]])
    min_eig = float(symmetric_eigenvalues(full)[0]) if full.size else 0.0
    if scale == 0.0:
        return PsdReport(True, min_eig)
    threshold = tol * scale

    def fail(tag: FailedCondition) -> PsdReport:
        return PsdReport(False, min_eig, tag)

    if n2 and symmetric_eigenvalues(y22)[0] < -threshold:
        return fail("Y22_not_psd")
    y22_pinv = pseudoinverse(0.5 * (y22 + y22.T), rel_tol) if n2 else np.zeros((0, 0))
    residual = (np.eye(n2) - y22 @ y22_pinv) @ y12.T
    if max_abs(residual) > threshold:
        return fail("range_condition")
    schur = y11 - y12 @ y22_pinv @ y12.T
    if n1 and symmetric_eigenvalues(schur)[0] < -threshold:
        return fail("schur_complement")
    return PsdReport(True, min_eig)
