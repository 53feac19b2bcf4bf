import numpy as np
import pytest
from scipy.integrate import solve_ivp

from fhnloop import orbits
from fhnloop.model import ModelParams, reaction, symmetric_gamma, symmetry_map, tw_vector_field

FAMILY = (100.0, 120.0, 140.0, 160.0)


@pytest.fixture(scope="module")
def family(loop):
    return orbits.continue_periodic(loop, FAMILY, threads=2)


def test_loop_converged(loop):
    assert np.max(np.abs(loop.splitting_residuals)) <= 1e-8
    assert loop.h1.bvp_residual <= 1e-8 and loop.h2.bvp_residual <= 1e-8
    assert loop.gamma0 == pytest.approx(symmetric_gamma(0.25), rel=0.02)
    assert loop.e1.a1_holds and loop.e2.a1_holds


def test_profile_residual_contract(loop):
    for h in (loop.h1, loop.h2):
        # direct ODE defect at interval midpoints of the Hermite interpolant
        xm = 0.5 * (h.mesh[1:] + h.mesh[:-1])
        defect = h.derivative(xm, via_field=False) - tw_vector_field(h(xm), h.params)
        assert np.max(np.abs(defect)) <= 1e-6
        assert h.bvp_residual <= 1e-8


def test_endpoint_decay_rates(loop):
    # measured log-slope of the profile tails against the eigenvalue rates
    h1 = loop.h1
    left = orbits.decay_rate_fit(h1, "left", target=loop.e1.point)
    right = orbits.decay_rate_fit(h1, "right", target=loop.e2.point)
    assert left == pytest.approx(loop.e1.alpha_u, rel=0.10)
    assert right == pytest.approx(loop.e2.alpha_s, rel=0.10)
    h2 = loop.h2
    assert orbits.decay_rate_fit(h2, "left", target=loop.e2.point) == pytest.approx(loop.e2.alpha_u, rel=0.10)
    assert orbits.decay_rate_fit(h2, "right", target=loop.e1.point) == pytest.approx(loop.e1.alpha_s, rel=0.10)


def test_endpoint_gap_bound(loop):
    h1 = loop.h1
    ell = -h1.mesh[0]
    gap = np.linalg.norm(h1.y[:, 0] - loop.e1.point)
    mid = np.linalg.norm(h1(np.array([0.0]))[:, 0] - loop.e1.point)
    assert gap <= 5.0 * np.exp(-loop.e1.alpha_u * ell) * mid


def test_back_is_reflected_front(loop):
    # h2(x) = S h1(x + s) for a shift s fixed by the phase conditions
    h1, h2 = loop.h1, loop.h2
    x = np.linspace(-40, 40, 801)
    ref = symmetry_map(h1(x), h1.params)
    shifts = np.linspace(-2, 2, 4001)
    errs = [np.max(np.abs(h2(x - s) - ref)) for s in shifts]
    assert min(errs) <= 1e-6


def test_singular_limit_speed():
    # fast subsystem front speed by shooting, independent of the collocation code
    a = 0.25

    def miss(c):
        p = ModelParams(a=a, gamma=1.0, epsilon=0.0, c=c)
        J = np.array([[0.0, 1.0], [a, c]])
        nu, V = np.linalg.eig(J)
        v = V[:, np.argmax(nu.real)].real
        v = v if v[0] > 0 else -v
        y0 = 1e-8 * v

        def rhs(x, y):
            return [y[1], c * y[1] - reaction(y[0], p)]

        def turn(x, y):
            return y[1]

        def past(x, y):
            return y[0] - 1.05

        turn.terminal = past.terminal = True
        turn.direction = -1
        sol = solve_ivp(rhs, (0, 400), y0, events=(turn, past), rtol=1e-11, atol=1e-13)
        # turning back before u = 1 means c too small, running past it means too large
        return len(sol.t_events[0]) > 0

    lo, hi = 0.1, 0.6
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if miss(mid):
            lo = mid
        else:
            hi = mid
    c0 = 0.5 * (lo + hi)
    assert c0 == pytest.approx((1 - 2 * a) / np.sqrt(2), abs=1e-4)
    gaps = []
    prev = None
    for eps in (0.004, 0.002, 0.001):
        prev = orbits.locate_loop(eps, a, initial=prev)
        gaps.append(abs(prev.c_star - c0))
    assert gaps[0] > gaps[1] > gaps[2]


def test_singular_front_shape():
    # as eps -> 0 the front's fast jump reaches the planar plateau u ~ 1
    tops = []
    for eps in (0.004, 0.001):
        loop = orbits.locate_loop(eps, 0.25)
        tops.append(loop.h1.y[0].max())
    assert abs(tops[1] - 1.0) < abs(tops[0] - 1.0)
    assert tops[1] == pytest.approx(1.0, abs=0.05)


def test_truncation_length_check(params_ref):
    with pytest.raises(orbits.TruncationError):
        orbits.compute_front(params_ref, half_length=5.0)


def test_variational_kernel_one_dimensional(loop):
    for h in (loop.h1, loop.h2):
        s = orbits.variational_kernel_certificate(h)
        assert s[1] >= 100 * s[0]


def test_mesh_refinement_stable(loop):
    h = loop.h1
    fine = orbits.refine_profile(h)
    x = np.linspace(-50, 50, 2001)
    assert np.max(np.abs(fine(x) - h(x))) <= 10 * max(h.tol, h.mesh_residual, 1e-9)


def test_profile_text_round_trip(loop, tmp_path):
    path = tmp_path / "h1.txt"
    loop.h1.save(path)
    back = orbits.OrbitProfile.load(path)
    assert np.array_equal(back.mesh, loop.h1.mesh)
    assert np.array_equal(back.y, loop.h1.y)
    assert back.kind == "front"
    assert back.params == loop.h1.params
    assert back.to_text() == loop.h1.to_text()


def test_loop_rebuilt_from_profiles(loop):
    again = orbits.LoopLocus.from_profiles(loop.h1, loop.h2)
    assert again.c_star == loop.c_star and again.gamma0 == loop.gamma0
    assert again.alpha == loop.alpha


def test_periodic_family_contracts(family, loop):
    assert not family.failures
    Ts = family.periods
    assert np.all(np.diff(Ts) > 0)
    for m in family.members:
        assert m.T == pytest.approx(2 * (m.L1 + m.L2), abs=1e-12)
        assert m.orbit.meta["closure"] <= 1e-9
        assert m.orbit.bvp_residual <= 1e-8
        again = orbits.PeriodicMember.from_orbit(m.orbit, loop)
        assert np.allclose(again.mu_T, m.mu_T, atol=1e-14)


def test_parameter_offset_decay(family, loop):
    # one-sided bound |mu_T| <= C exp(-2 alpha L): log-slope at most -alpha
    L = np.array([min(m.L1, m.L2) for m in family.members])
    mu = np.array([np.linalg.norm(m.mu_T) for m in family.members])
    assert np.all(np.diff(mu) < 0)
    slope = np.polyfit(L, np.log(mu), 1)[0]
    assert slope <= -loop.alpha


def test_sup_distance_decay(family, loop):
    L = np.array([min(m.L1, m.L2) for m in family.members])
    d = np.array([orbits.sup_distance_to_loop(m, loop) for m in family.members])
    slope = np.polyfit(L, np.log(d), 1)[0]
    assert slope <= -0.75 * loop.alpha


def test_periodic_stays_near_loop(family, loop):
    assert orbits.tube_fraction(family.members[-1], loop, 0.05) > 0.8


def test_short_period_rejected(loop):
    with pytest.raises(ValueError, match="threshold"):
        orbits.continue_periodic(loop, [40.0])
