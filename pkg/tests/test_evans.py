import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import fsolve

from fhnloop import evans, melnikov
from fhnloop.bloch import xi_grid

pos = st.floats(min_value=0.1, max_value=2.0)
neg = st.floats(min_value=-2.0, max_value=-0.1)


def _synthetic(T=100.0, s=(0.8, 0.6), u=(0.1, 0.05), m=(-0.3, -0.4), scale=1e-4, case="general"):
    return evans.ReducedEvansData.synthetic(T, scale * s[0], scale * s[1], scale * u[0], scale * u[1], m[0], m[1],
                                            case_tag=case)


@st.composite
def synthetic_data(draw):
    T = draw(st.floats(20.0, 400.0))
    s1, s2 = draw(pos), draw(pos)
    u1, u2 = draw(st.floats(0.0, 0.09)), draw(st.floats(0.0, 0.09))
    return _synthetic(T, (s1, s2), (u1, u2), (draw(neg), draw(neg)), scale=draw(st.floats(1e-8, 1e-2)))


@pytest.fixture(scope="module")
def fhn_data(loop, adjoints):
    md = melnikov.melnikov_data(*adjoints, loop.h1, loop.h2)
    out = []
    for T in (120.0, 160.0, 200.0):
        bp = melnikov.boundary_products(*adjoints, loop.h1, loop.h2, T / 4, T / 4)
        out.append(evans.ReducedEvansData.from_components(bp, md))
    return out


def test_determinant_vanishes_at_origin(fhn_data):
    for data in fhn_data:
        assert evans.evaluate_E(0.0, 0.0, data) == 0.0


@given(synthetic_data(), st.complex_numbers(max_magnitude=1.0, allow_nan=False, allow_infinity=False))
def test_determinant_linear_at_zero_xi(data, lam):
    expected = -lam * data.denominator(asymptotic=False)
    assert abs(evans.evaluate_E(lam, 0.0, data) - expected) <= 1e-14 * (1 + abs(expected))


@given(synthetic_data(), st.floats(-1.0, 1.0), st.complex_numbers(max_magnitude=1e-3, allow_nan=False,
                                                                     allow_infinity=False))
def test_determinant_periodic_in_xi(data, frac, lam):
    xi = frac * np.pi / data.T
    a = evans.evaluate_E(lam, xi, data)
    b = evans.evaluate_E(lam, xi + 2 * np.pi / data.T, data)
    assert abs(a - b) <= 1e-14 * max(1.0, abs(a)) + 1e-14 * abs(data.p1m * data.p2m) * 10


@settings(max_examples=50)
@given(synthetic_data(), st.floats(-1.0, 1.0))
def test_closed_form_matches_independent_root(data, frac):
    xi = frac * np.pi / data.T

    def F(z):
        val = evans.evaluate_E(z[0] + 1j * z[1], xi, data)
        return [val.real, val.imag]

    scale = abs(data.S1) / abs(data.M1)
    z = fsolve(lambda v: np.array(F(v * scale)) / (scale * abs(data.M1)), [0.0, 0.0], xtol=1e-14)
    root = (z[0] + 1j * z[1]) * scale
    cf = complex(evans.closed_form(xi, data))
    assert abs(cf - root) <= 1e-10 * max(abs(root), 1e-300) + 1e-22


def test_symmetric_synthetic_closed_form():
    s, u, m, T = 2e-3, 3e-4, -0.25, 80.0
    data = evans.ReducedEvansData.synthetic(T, s, s, u, u, m, m)
    for xi in xi_grid(T, 33):
        ph = np.exp(1j * xi * T)
        expected = (1 - ph) * (u * u - np.conj(ph) * s * s) / (2 * m * (s - u))
        assert abs(evans.closed_form(xi, data) - expected) <= 1e-15


@given(synthetic_data(), st.floats(0.1, 10.0))
def test_scale_invariance_of_roots(data, sigma):
    grid = xi_grid(data.T, 33)
    scaled = data.scaled_psi1(sigma)
    for xi in grid[::4]:
        a = evans.newton_root(xi, data, 0.0)
        b = evans.newton_root(xi, scaled, 0.0)
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@given(synthetic_data())
def test_conjugate_symmetry(data):
    grid = xi_grid(data.T, 33)
    lam = np.array([complex(evans.closed_form(x, data)) for x in grid])
    assert np.max(np.abs(lam - np.conj(lam[::-1]))) <= 1e-12 * max(1.0, np.abs(lam).max())


def test_solve_lambda_at_zero():
    res = evans.solve_lambda(0.0, _synthetic())
    assert res.closed_form == 0 and res.newton == 0


def test_denominator_margin_enforced():
    data = evans.ReducedEvansData.synthetic(100.0, 1e-3, 1e-3, 1e-3, 1e-3, -0.3, -0.3)
    with pytest.raises(evans.DenominatorError):
        evans.solve_lambda(0.1, data)


def test_case_classification():
    assert evans.classify_case({"a1s": 0.1, "a2s": 0.1, "a1u": 0.5, "a2u": 0.5}) == ("equal_leading_rates", False)
    assert evans.classify_case({"a1s": 0.1, "a2s": 0.2, "a1u": 0.5, "a2u": 0.5})[0] == "dominated_rate"
    tag, gray = evans.classify_case({"a1s": 0.1, "a2s": 0.1055, "a1u": 0.5, "a2u": 0.5})
    assert gray


def test_gray_zone_emits_both_forms():
    data = _synthetic()
    data.rates = {"a1s": 0.1, "a2s": 0.1055, "a1u": 0.5, "a2u": 0.5}
    data.gray_zone = True
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        res = evans.solve_lambda(0.01, data)
    assert rec and set(res.alternates) == {"equal_leading_rates", "dominated_rate"}


def test_tangency_fit_exact_quadratic():
    b, d = 0.37, 2.5
    xi = np.linspace(-0.01, 0.01, 9)
    fit = evans.fit_tangency(xi, 1j * b * xi - d * xi**2)
    assert fit.b == pytest.approx(b, abs=1e-12) and fit.d == pytest.approx(d, abs=1e-12)
    with pytest.raises(evans.FitError):
        evans.fit_tangency(xi[:5], xi[:5])


def test_analytic_coefficients_match_differences():
    data = _synthetic(T=120.0)
    b, d = evans.analytic_coefficients(data)
    h = 1e-3 / data.T
    lam = [complex(evans.closed_form(x, data)) for x in (-h, 0.0, h)]
    b_fd = ((lam[2] - lam[0]) / (2 * h)).imag
    d_fd = -((lam[2] - 2 * lam[1] + lam[0]) / h**2).real / 2
    assert b == pytest.approx(b_fd, rel=1e-6)
    assert d == pytest.approx(d_fd, rel=1e-6)


def test_fhn_critical_curve(fhn_data, tmp_path):
    for data in fhn_data:
        assert data.case_tag == "equal_leading_rates"
        curve = evans.critical_curve(data, 33)
        assert curve.closed_form[16] == 0
        assert np.all(curve.closed_form.real <= 0)
        assert curve.d > 0
        assert evans.tangency_coefficients(curve).d > 0
    path = tmp_path / "curve.csv"
    curve.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["xi", "re_lambda", "im_lambda", "source"]
    assert len(rows) == 1 + 2 * 33


def test_newton_closed_form_gap_shrinks(fhn_data):
    gaps = []
    for data in fhn_data:
        xi = np.pi / (2 * data.T)
        r = evans.solve_lambda(xi, data)
        gaps.append(abs(r.newton - r.closed_form) / abs(r.closed_form))
    assert gaps[0] > gaps[1] > gaps[2]


@given(synthetic_data(), st.floats(-1.0, 1.0), st.complex_numbers(max_magnitude=1e-3, allow_nan=False,
                                                                     allow_infinity=False))
def test_interaction_determinant_is_two_by_two(data, frac, lam):
    xi = frac * np.pi / data.T
    ph = np.exp(1j * xi * data.T)
    S1, S2, U1, U2 = data.p1m, data.p2m, data.p21, data.p12m
    mat = np.array([[lam * data.M1 - S1 + U2, -(S1 / ph - U2)],
                    [-(S2 - U1 * ph), lam * data.M2 - S2 + U1]])
    direct = np.linalg.det(mat)
    val = evans.evaluate_interaction(lam, xi, data)
    scale = abs(lam * data.M1) ** 2 + abs(S1) ** 2 + abs(S2) ** 2 + abs(lam * data.M2) ** 2
    assert abs(val - direct) <= 1e-12 * scale


@given(synthetic_data(), st.floats(-1.0, 1.0))
def test_interaction_roots_solve_determinant(data, frac):
    xi = frac * np.pi / data.T
    crit = evans.interaction_critical(xi, data)
    assert abs(evans.evaluate_interaction(crit, xi, data)) <= 1e-9 * abs(data.S1 * data.S2 + data.S1**2)
    assert min(abs(r - crit) for r in evans.interaction_roots(xi, data)) == 0
