import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fhnloop import pde
from fhnloop.wave import PeriodicWave

CELLS = 4


@pytest.fixture(scope="module")
def short_run(wave40):
    spec = pde.PerturbationSpec(amplitude=1e-3, center=0.5 + 10.0 / (CELLS * 40.0), width=5.0)
    return pde.run_experiment(wave40, spec, 100.0, 1.0, cells=CELLS, dt=0.5)


def test_wave_is_discrete_steady_state(wave40):
    s0 = pde.FieldState.from_wave(wave40, CELLS)
    s1 = pde.integrate(s0, 0.5, 1000)
    assert max(np.abs(s1.u - s0.u).max(), np.abs(s1.w - s0.w).max()) <= 1e-8
    assert s1.t == pytest.approx(500.0)


def test_zero_state_stays_zero(wave40):
    n = wave40.n * CELLS
    s = pde.FieldState(np.zeros(n), np.zeros(n), 0.0, wave40.params, CELLS * wave40.T, CELLS)
    out = pde.integrate(s, 0.5, 50)
    assert np.all(out.u == 0) and np.all(out.w == 0)


def test_second_order_in_time(wave40):
    s = pde.FieldState.from_wave(wave40, 1)
    s.u = s.u + 1e-2 * np.exp(-0.5 * ((s.x - 20.0) / 3.0) ** 2)
    res = pde.temporal_order(s, 4.0, 0.2)
    assert res["ratio"] == pytest.approx(4.0, rel=0.15)


def test_step_rejects_unstable_dt(wave40):
    s = pde.FieldState.from_wave(wave40, 1)
    with pytest.raises(pde.StabilityError):
        pde.step(s, 10.0)
    assert pde.stability_bound(s.u, s.params) > 0.5


def test_linear_response_to_amplitude(wave40):
    specs = [pde.PerturbationSpec(amplitude=A, width=5.0) for A in (1e-4, 5e-5)]
    runs = pde.run_many(wave40, specs, 40.0, 5.0, threads=2, cells=CELLS, dt=0.5, phase=False)
    ratio = runs[0].series["vt_l2"][-1] / runs[1].series["vt_l2"][-1]
    assert ratio == pytest.approx(2.0, rel=0.05)


def test_zero_perturbation(wave40):
    run = pde.run_experiment(wave40, pde.PerturbationSpec(amplitude=0.0), 20.0, 1.0, cells=CELLS, dt=0.5)
    assert np.max(run.series["vt_l2"]) <= 1e-10
    assert np.max(run.series["phi_l2"]) <= 1e-10
    dmp = pde.damping_check(run)
    assert dmp["C"] == 0 and dmp["uniform"]


def test_smallness_proxy_enforced(wave40):
    with pytest.raises(pde.SmallnessError):
        pde.run_experiment(wave40, pde.PerturbationSpec(amplitude=10.0), 1.0, 1.0, cells=CELLS)


@pytest.fixture(scope="module")
def extractor(wave40):
    return pde.PhaseExtractor(wave40, CELLS)


@pytest.mark.parametrize("delta", [0.0, 0.03, -0.4, 2.5])
def test_phase_of_rigid_translate(wave40, extractor, delta):
    moved = wave40.translate(delta)
    st_ = pde.FieldState.from_wave(moved, CELLS)
    pf = extractor.extract(st_)
    assert pf.ok
    assert np.max(np.abs(pf.phi - delta)) <= 1e-9
    assert np.max(np.abs(pf.V[0])) <= 1e-8 and np.max(np.abs(pf.V[1])) <= 1e-8


def test_phase_of_first_order_shift(wave40, extractor):
    # Ubar - delta Ubar' = Ubar(x - delta) + O(delta^2)
    delta = 1e-4
    base = pde.FieldState.from_wave(wave40, CELLS)
    st_ = base.copy()
    st_.u = st_.u - delta * extractor.ubar_x
    st_.w = st_.w - delta * extractor.wbar_x
    pf = extractor.extract(st_)
    assert np.max(np.abs(pf.phi - delta)) <= 100 * delta**2


@given(st.floats(-3.0, 3.0), st.floats(0.1, 10.0))
def test_exponent_fit_on_exact_power_law(p, A):
    t = np.linspace(0.0, 1000.0, 401)
    fit = pde.fit_exponent(t, A * (1 + t) ** p)
    assert fit.exponent == pytest.approx(p, abs=1e-10)
    assert fit.ci[0] <= fit.exponent <= fit.ci[1]


def test_exponent_fit_needs_samples():
    with pytest.raises(ValueError):
        pde.fit_exponent(np.arange(5.0), np.ones(5))


def test_damping_violation_recorded(wave40):
    t = np.linspace(0.0, 400.0, 4001)
    run = pde.EvolutionRun(times=t, series={"vt_h4": np.exp(0.02 * t), "vt_l2": np.ones_like(t)},
                           perturbation=pde.PerturbationSpec(), initial_norms={},
                           meta={"epsilon": 0.0025, "gamma": 72 / 7})
    res = pde.damping_check(run)
    assert not res["uniform"]
    assert 200.0 < res["first_violation_time"] <= 400.0


def test_short_run_series(short_run, wave40):
    assert not short_run.blowup
    assert short_run.phase_ok.all()
    slack = pde.phase_consistency(short_run, wave40)
    assert np.all(slack >= -1e-12)
    for key in ("vt_l2", "vt_h4", "v_l2", "phi_l2", "phix_l2", "phit_l2"):
        assert np.all(np.isfinite(short_run.series[key]))


def test_spatial_self_convergence(wave40, short_run):
    fine = pde.refine_wave(wave40, 2)
    run = pde.run_experiment(fine, short_run.perturbation, 100.0, 1.0, cells=CELLS, dt=0.5)
    a, b = short_run.series["vt_l2"], run.series["vt_l2"]
    assert np.max(np.abs(a - b) / b) <= 0.01
    pa, pb = short_run.series["phi_l2"][1:], run.series["phi_l2"][1:]
    assert np.max(np.abs(pa - pb) / pb) <= 0.01


def test_snapshot_round_trip(wave40, tmp_path):
    s = pde.FieldState.from_wave(wave40, 2)
    pde.save_snapshot(s, tmp_path / "snap.txt")
    back = pde.load_snapshot(tmp_path / "snap.txt")
    assert np.array_equal(back.u, s.u) and np.array_equal(back.w, s.w)
    assert back.params == s.params and back.cells == 2 and back.length == s.length


def test_perturbation_validation():
    with pytest.raises(ValueError):
        pde.PerturbationSpec(shape="square")
    with pytest.raises(ValueError):
        pde.PerturbationSpec(width=0.0)
    bump = pde.PerturbationSpec(shape="compact-bump", width=2.0)
    x = np.linspace(0, 20, 201)
    p = bump.profile(x, 20.0)
    assert p.max() == pytest.approx(1.0) and p[0] == 0 and p[-1] == 0


def test_field_state_shape_checks(wave40):
    with pytest.raises(ValueError):
        pde.FieldState(np.zeros(10), np.zeros(9), 0.0, wave40.params, 10.0)
    with pytest.raises(ValueError):
        pde.FieldState(np.zeros(10), np.zeros(10), 0.0, wave40.params, 10.0, cells=3)


def test_wave_translate_type(wave40):
    assert isinstance(wave40.translate(1.0), PeriodicWave)
