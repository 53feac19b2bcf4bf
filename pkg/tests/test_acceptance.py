"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Criteria 1-8 read the artifacts of the default pipeline run (the
``reference_out`` fixture); 9 and 10 are computed here.
"""

import numpy as np
import pytest

from fhnloop import evans
from fhnloop.bloch import bloch_parseval_check
from fhnloop.pipeline import read_json


def _verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
    assert ok, f"criterion {number} ({title}): {detail}"


@pytest.fixture(scope="module")
def art(reference_out):
    out = reference_out.out
    return {name: read_json(out / rel) for name, rel in (
        ("loop", "loop/loop.json"), ("family", "periodic/family.json"), ("melnikov", "melnikov/melnikov.json"),
        ("reduce", "reduce/reduce.json"), ("sweep", "sweep/sweep.json"), ("evolve", "evolve/evolve.json"))}


def test_criterion_01_translation_mode(art, capsys):
    rows = []
    ok = True
    for m in art["sweep"]["members"]:
        rel = m["translation_residual"] / m["translation_norm"]
        gap = m["second_eigenvalue_abs"] / max(m["lambda0_abs"], 1e-300)
        ok &= rel <= 1e-6 and gap >= 1e3
        rows.append(f"T={m['T']:g} |L0 U'|/|U'|={rel:.1e} gap ratio={gap:.1e}")
    _verdict(capsys, 1, "translation mode", ok, "; ".join(rows))


def test_criterion_02_diffusive_stability(art, capsys):
    ok = True
    rows = []
    for m in art["sweep"]["members"]:
        ok &= m["cond1_left_half_plane"] and m["cond2_quadratic_bound"] and m["cond3_simple_translation_zero"]
        ok &= m["d"] > 0 and m["theta"] > 0
        rows.append(f"T={m['T']:g} d={m['d']:.3g} theta={m['theta']:.3g}")
    _verdict(capsys, 2, "diffusive spectral stability", ok, "; ".join(rows))


def test_criterion_03_cross_method(art, capsys):
    by_T = {r["T"]: r for r in art["reduce"]["members"]}
    errs = []
    for m in sorted(art["sweep"]["members"], key=lambda m: m["T"]):
        hill = [complex(z["re"], z["im"]) for z in m["hill_quarter"]]
        cf = [complex(z["re"], z["im"]) for z in by_T[m["T"]]["closed_form_quarter"]]
        errs.append((m["T"], max(abs(h - q) / abs(h) for h, q in zip(hill, cf))))
    (T0, e0), (T1, e1) = errs[0], errs[-1]
    ok = e1 <= 0.2 and e1 <= 0.5 * e0
    detail = ", ".join(f"T={T:g}: {e:.3f}" for T, e in errs)
    _verdict(capsys, 3, "Hill vs closed form at xi=+-pi/(2T)", ok,
             f"relative errors {detail} (need <= 0.2 at T={T1:g} and <= 0.5x the T={T0:g} value)")


def test_criterion_04_exponential_scaling(art, capsys):
    sw = art["sweep"]
    slope, a1s = sw["scaling_slope"], sw["alpha1s"]
    rel = abs(slope + a1s) / a1s
    _verdict(capsys, 4, "exponential scaling", rel <= 0.15,
             f"slope={slope:.5f} vs -alpha1s={-a1s:.5f} (relative error {rel:.3f})")


def test_criterion_05_melnikov(art, capsys):
    m = art["melnikov"]
    e = m["errors"]
    N1, N2 = m["N1"], m["N2"]
    e1, e2 = e["N1"], e["N2"]
    det_err = abs(N2[1]) * e1[0] + abs(N1[0]) * e2[1] + abs(N2[0]) * e1[1] + abs(N1[1]) * e2[0]
    ok = (m["M1"] < 0 and m["M2"] < 0 and abs(m["M1"]) >= 1e3 * e["M1"] and abs(m["M2"]) >= 1e3 * e["M2"]
          and abs(m["det_N"]) > 0 and abs(m["det_N"]) >= 1e3 * det_err)
    _verdict(capsys, 5, "Melnikov signs and independence", ok,
             f"M1={m['M1']:.5f} (err {e['M1']:.1e}) M2={m['M2']:.5f} (err {e['M2']:.1e}) "
             f"det N={m['det_N']:.3e} (err {det_err:.1e})")


def test_criterion_06_solver_gates(art, capsys):
    lp, fam = art["loop"], art["family"]
    split = max(abs(r) for r in lp["splitting_residuals"])
    bvp = max([lp["bvp_residual"]] + [m["bvp_residual"] for m in fam["members"]])
    closure = max(m["closure"] for m in fam["members"])
    slope, bound = fam["sup_distance_slope"], -0.75 * fam["alpha"]
    ok = bvp <= 1e-8 and split <= 1e-8 and closure <= 1e-9 and slope <= bound and not fam["failures"]
    _verdict(capsys, 6, "connecting-orbit solver gates", ok,
             f"bvp={bvp:.1e} splitting={split:.1e} closure={closure:.1e} "
             f"sup-distance slope={slope:.4f} (bound {bound:.4f})")


def test_criterion_07_nonlinear_decay(art, capsys):
    ev = art["evolve"]
    fits = ev["fits"]
    vt, v = fits["vt_l2"]["exponent"], fits["v_l2"]["exponent"]
    ok = (ev["meta"]["cells"] >= 40 and not ev["blowup"] and -0.45 <= vt <= -0.10 and v <= -0.5
          and vt - v >= 0.25)
    _verdict(capsys, 7, "nonlinear decay (finite window, desk scale)", ok,
             f"|V~|_L2 exponent={vt:.3f} (target -1/4), |V|_L2 exponent={v:.3f} (target -3/4), "
             f"separation={vt - v:.3f}, {ev['meta']['cells']} cells, t_end={ev['meta']['t_end']:g}")


def test_criterion_08_damping(art, capsys):
    d = art["evolve"]["damping"]
    ok = bool(d["uniform"]) and d["C"] is not None and np.isfinite(d["C"])
    _verdict(capsys, 8, "damping certificate", ok,
             f"C={d['C']:.4g} (mid-run {d['C_mid']:.4g}), first violation={d['first_violation_time']}")


def test_criterion_09_parseval(capsys):
    T, cells, m = 1.0, 64, 16
    x = np.arange(cells * m) * (T / m)
    g = np.exp(-((x - cells * T / 2) ** 2) / 16.0)
    rel = bloch_parseval_check(g, T, cells)["relative_error"]
    _verdict(capsys, 9, "Bloch transform Parseval", rel <= 1e-10, f"relative error {rel:.2e}")


def test_criterion_10_oracle_equivalence(capsys):
    rng = np.random.default_rng(2024)
    worst = 0.0
    draws = 0
    while draws < 50:
        T = rng.uniform(40.0, 400.0)
        scale = 10.0 ** rng.uniform(-8, -2)
        S1, S2 = scale * rng.uniform(0.1, 2.0, 2)
        U1, U2 = scale * rng.uniform(0.0, 0.09, 2)
        M1, M2 = -rng.uniform(0.1, 2.0, 2)
        data = evans.ReducedEvansData.synthetic(T, S1, S2, U1, U2, M1, M2)
        if data.denominator_margin() < 1e-8:
            continue
        draws += 1
        for xi in rng.uniform(-np.pi / T, np.pi / T, 3):
            newton = evans.newton_root(xi, data, 0.0)
            closed = complex(evans.closed_form(xi, data))
            worst = max(worst, abs(newton - closed) / max(abs(closed), 1e-300))
    _verdict(capsys, 10, "Newton vs closed form on synthetic data", worst <= 1e-10,
             f"worst relative gap {worst:.1e} over {draws} draws")
