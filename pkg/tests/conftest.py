import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sbp_sat_lab.operators import build_second_deriv
from sbp_sat_lab.sats import SatCoeffs

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

NARROW = [("csbp", p, "narrow") for p in (1, 2, 3, 4)]
WIDE = [(fam, p, "wide") for fam in ("lgl", "lg") for p in (1, 2, 3, 4)] + \
       [("csbp", p, "wide") for p in (1, 2, 3, 4)]
ALL_OPERATORS = NARROW + WIDE


def operator_id(spec) -> str:
    family, p, stencil = spec
    return f"{family}-{stencil}-p{p}"


@pytest.fixture(scope="session")
def operator_cache():
    cache = {}

    def get(family, p, stencil, n=None):
        key = (family, p, stencil, n)
        if key not in cache:
            cache[key] = build_second_deriv(family, p, n, stencil)
        return cache[key]
    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)


def random_coeffs(rng, consistent: bool) -> SatCoeffs:
    t = rng.normal(size=9)
    if consistent:
        t1 = t[0]
        return SatCoeffs(T1_k=t1, T1_v=t1, T2_k=t[1], T2_v=-1 - t[1], T3_k=t[2], T3_v=1 - t[2],
                         T4_k=t[3], T4_v=t[3], TD=abs(t[4]))
    if rng.random() < 0.5:
        t[1] = t[0]  # sometimes satisfy a subset of the conditions
    return SatCoeffs(*t[:8], TD=abs(t[8]))


def boundary_only_residual(mesh, bc, family, u):
    """Sum of ``1^T H (A u - rhs)`` predicted from boundary-face quantities alone (f = 0)."""
    total = 0.0
    for side, idx in (("left", 0), ("right", mesh.n_elements - 1)):
        e = mesh.elements[idx]
        u_e = u[mesh.block(idx)]
        R, D = e.face_row(side), e.normal_derivative(side)
        cond = bc.side(side)
        total -= D @ u_e  # outward flux through the face from the volume term
        if cond.kind == "dirichlet":
            total += family.dirichlet(e, side).TD * R.sum() * (R @ u_e - cond.value) - D.sum() * (R @ u_e - cond.value)
        else:
            total += R.sum() * (D @ u_e - cond.value)
    return total
