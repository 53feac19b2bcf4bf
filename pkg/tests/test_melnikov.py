import numpy as np
import pytest
from scipy.integrate import simpson

from fhnloop import melnikov, orbits
from fhnloop.model import tw_param_jacobian

PERIODS = (120.0, 160.0, 200.0)


@pytest.fixture(scope="module")
def mdata(loop, adjoints):
    return melnikov.melnikov_data(*adjoints, loop.h1, loop.h2)


@pytest.fixture(scope="module")
def products(loop, adjoints):
    return [melnikov.boundary_products(*adjoints, loop.h1, loop.h2, T / 4, T / 4) for T in PERIODS]


def test_adjoint_contracts(adjoints, loop):
    for psi, h in zip(adjoints, (loop.h1, loop.h2)):
        assert psi.residual <= 1e-8
        assert psi.kernel_sigmas[1] >= 100 * psi.kernel_sigmas[0]
        assert psi.profile.kind == "adjoint"
        i0 = h.node_index(0.0)
        assert np.linalg.norm(psi.profile.y[:, i0]) == pytest.approx(1.0, abs=1e-14)


def test_adjoint_annihilates_tangent(adjoints, loop):
    # <psi, h'> is constant in x and vanishes at both ends, so it is zero everywhere
    for psi, h in zip(adjoints, (loop.h1, loop.h2)):
        x = np.linspace(h.mesh[0], h.mesh[-1], 5001)
        pairing = np.sum(psi(x) * h.derivative(x), axis=0)
        assert np.max(np.abs(pairing)) <= 1e-8


def test_adjoint_decay_rates(products, loop):
    # per-end log-slopes of psi against the equilibrium rates
    bp = products[0]
    r = bp.rates
    meas = bp.measured_rates
    for key, rate in (("w1p", r["a1s"]), ("w2p", r["a2s"]), ("w1m", r["a1u"]), ("w2m", r["a2u"])):
        assert meas[key] == pytest.approx(rate, rel=0.15)


def test_orientation(products):
    assert products[0].pairings["w1p_v1p"] > 0
    assert products[0].pairings["w2p_v2p"] > 0


def test_limit_vectors_align_with_eigenvectors(products, loop):
    lv = products[0].limit_vectors
    e1, e2 = loop.e1, loop.e2

    def angle(a, b):
        a, b = np.real(a), np.real(b)
        return np.arccos(min(1.0, abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))))

    assert angle(lv["v1p"], e1.leading_stable_vec) <= 1e-3
    assert angle(lv["v2p"], e2.leading_stable_vec) <= 1e-3
    assert angle(lv["v1m"], e1.leading_unstable_vec) <= 1e-3
    assert angle(lv["v2m"], e2.leading_unstable_vec) <= 1e-3
    assert angle(lv["w1p"], e1.adjoint_leading_vecs[0]) <= 1e-3
    assert angle(lv["w2p"], e2.adjoint_leading_vecs[0]) <= 1e-3


def test_melnikov_signs_and_margins(mdata):
    err = mdata.quadrature_error_estimates
    assert mdata.M1 < 0 and mdata.M2 < 0
    assert abs(mdata.M1) >= 1e3 * err["M1"]
    assert abs(mdata.M2) >= 1e3 * err["M2"]
    assert abs(mdata.det_N) > 0


def test_melnikov_symmetric_case(mdata):
    assert mdata.M1 == pytest.approx(mdata.M2, rel=1e-6)


def test_quadrature_node_doubling(adjoints, loop):
    res = melnikov.melnikov_lambda(adjoints[0], loop.h1)
    assert abs(res.refined - res.value) <= 1e-6 * abs(res.value)


def test_two_quadrature_paths(adjoints, loop, mdata):
    # with B the c-derivative direction, the c-component of N equals M;
    # the second path integrates <psi, dF/dc(h)> with Simpson's rule on a fine uniform grid
    for psi, h, M, N in ((adjoints[0], loop.h1, mdata.M1, mdata.N1), (adjoints[1], loop.h2, mdata.M2, mdata.N2)):
        x = np.linspace(h.mesh[0], h.mesh[-1], 400001)
        g = np.einsum("am,am->m", psi(x), tw_param_jacobian(h(x), h.params)[:, 1, :])
        direct = simpson(g, x=x)
        assert direct == pytest.approx(M, rel=1e-8, abs=1e-10)
        assert N[1] == pytest.approx(M, rel=1e-8)


def test_gamma_component_vanishes_without_epsilon(adjoints, loop):
    prm = loop.h1.params.replace(epsilon=0.0)
    N, _ = melnikov.melnikov_params(adjoints[0], loop.h1, prm)
    assert N[0] == 0.0


def test_boundary_products_symmetric(products):
    for bp in products:
        assert bp.S1 == pytest.approx(bp.S2, rel=1e-6)
        assert bp.U1 == pytest.approx(bp.U2, rel=1e-6)


def test_boundary_products_match_asymptotics(products):
    errs = [abs(bp.p1m - bp.S1) / abs(bp.S1) for bp in products]
    assert errs[0] > errs[1] > errs[2]
    errs2 = [abs(bp.p2m - bp.S2) / abs(bp.S2) for bp in products]
    assert errs2[0] > errs2[1] > errs2[2]


def test_boundary_products_decay(products):
    for key in ("p21", "p12m", "p1m", "p2m"):
        vals = [abs(getattr(bp, key)) for bp in products]
        assert vals[0] > vals[1] > vals[2]


def test_boundary_products_outside_mesh(adjoints, loop):
    L = loop.h1.mesh[-1] + 1.0
    with pytest.raises(ValueError):
        melnikov.boundary_products(*adjoints, loop.h1, loop.h2, L, 10.0)


def test_kernel_dimension_check(loop):
    with pytest.raises(melnikov.KernelDimensionError):
        melnikov.compute_adjoint(loop.h1, kernel_ratio=1e300)


def test_adjoint_checkpoint_round_trip(adjoints, tmp_path):
    prof = adjoints[0].profile
    prof.save(tmp_path / "psi1.txt")
    back = orbits.OrbitProfile.load(tmp_path / "psi1.txt")
    assert np.array_equal(back.y, prof.y) and back.kind == "adjoint"
