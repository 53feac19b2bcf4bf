"""Co-moving-frame FitzHugh-Nagumo PDE on a periodic window of many wave cells.

    u_t = u_xx - c u_x + f(u) - w,    w_t = -c w_x + eps (u - gamma w)

Diffusion and advection are diagonal in Fourier space and are treated
implicitly; the reaction and the (u, w) coupling are explicit.  The time
stepper is the two-stage, stiffly accurate IMEX Runge-Kutta scheme
ARS(2,2,2).  The explicit part is evaluated exactly as in
``wave.steady_residual``, so a polished wave is a steady state of the
discrete scheme.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse, stats

from .model import ModelParams, reaction_deriv
from .wave import PeriodicWave, dealiased_reaction, first_derivative_symbol, wavenumbers

logger = logging.getLogger(__name__)

ARS_GAMMA = 1.0 - 1.0 / np.sqrt(2.0)
ARS_DELTA = 1.0 - 1.0 / (2.0 * ARS_GAMMA)


class StabilityError(ValueError):
    """Time step outside the stability bound of the explicit part."""


class BlowupError(ArithmeticError):
    """Non-finite or runaway state."""


class SmallnessError(ValueError):
    """Perturbation too large for the small-data experiment."""


# ------------------------------------------------------------------ state
@dataclass
class FieldState:
    """(u, w) on a uniform periodic grid of a window of ``cells`` wave periods."""

    u: np.ndarray
    w: np.ndarray
    t: float
    params: ModelParams
    length: float
    cells: int = 1

    def __post_init__(self):
        if self.u.shape != self.w.shape or self.u.ndim != 1:
            raise ValueError("u and w must be 1-d arrays of equal length")
        if self.u.size % self.cells:
            raise ValueError("grid size must be a multiple of the cell count")

    @property
    def n(self) -> int:
        return self.u.size

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n) * self.dx

    @property
    def k(self) -> np.ndarray:
        return wavenumbers(self.n, self.length)

    def copy(self) -> "FieldState":
        return FieldState(self.u.copy(), self.w.copy(), self.t, self.params, self.length, self.cells)

    @classmethod
    def from_wave(cls, wave: PeriodicWave, cells: int) -> "FieldState":
        u, w = wave.tiled(cells)
        return cls(u, w, 0.0, wave.params, cells * wave.T, cells)


def explicit_rhs(u, w, params: ModelParams):
    return dealiased_reaction(u, params.a) - w, params.epsilon * (u - params.gamma * w)


def implicit_symbols(k, c):
    """Fourier symbols of the implicit part for u and w."""
    d1 = first_derivative_symbol(k)
    return -(k**2) - c * d1, -c * d1


def stability_bound(u, params: ModelParams, safety=0.5) -> float:
    """Largest admissible dt from the Lipschitz constant of the explicit part."""
    lip = float(np.max(np.abs(reaction_deriv(u, params.a)))) + 1.0 + params.epsilon * (1.0 + params.gamma)
    return safety * 2.0 / lip


def _half_symbols(n, length, c):
    k = wavenumbers(n, length)[: n // 2 + 1].copy()
    if n % 2 == 0:
        k[-1] = abs(k[-1])
    d1 = 1j * k
    if n % 2 == 0:
        d1[-1] = 0.0
    return -(k**2) - c * d1, -c * d1


def step(state: FieldState, dt: float, *, check=True) -> FieldState:
    """One ARS(2,2,2) step."""
    prm = state.params
    if check:
        bound = stability_bound(state.u, prm)
        if not 0.0 < dt <= bound:
            raise StabilityError(f"dt={dt} outside the stability bound (0, {bound:.4g}]")
    n = state.n
    Lu, Lw = _half_symbols(n, state.length, prm.c)
    g, d = ARS_GAMMA, ARS_DELTA
    du, dw = 1.0 / (1.0 - dt * g * Lu), 1.0 / (1.0 - dt * g * Lw)
    rf, irf = np.fft.rfft, np.fft.irfft
    uh0, wh0 = rf(state.u), rf(state.w)
    n1u, n1w = (rf(v) for v in explicit_rhs(state.u, state.w, prm))
    uh2 = (uh0 + dt * g * n1u) * du
    wh2 = (wh0 + dt * g * n1w) * dw
    n2u, n2w = (rf(v) for v in explicit_rhs(irf(uh2, n), irf(wh2, n), prm))
    uh3 = (uh0 + dt * (d * n1u + (1.0 - d) * n2u) + dt * (1.0 - g) * Lu * uh2) * du
    wh3 = (wh0 + dt * (d * n1w + (1.0 - d) * n2w) + dt * (1.0 - g) * Lw * wh2) * dw
    u3, w3 = irf(uh3, n), irf(wh3, n)
    if check and not (np.all(np.isfinite(u3)) and np.all(np.isfinite(w3))):
        raise BlowupError(f"non-finite state at t={state.t + dt}")
    return FieldState(u3, w3, state.t + dt, prm, state.length, state.cells)


def integrate(state: FieldState, dt: float, steps: int) -> FieldState:
    for _ in range(steps):
        state = step(state, dt)
    return state


# ------------------------------------------------------------------ norms
def l2_norm(u, w, length) -> float:
    dx = length / u.size
    return float(np.sqrt(dx * (np.sum(u * u) + np.sum(w * w))))


def l1_norm(u, w, length) -> float:
    dx = length / u.size
    return float(dx * (np.sum(np.abs(u)) + np.sum(np.abs(w))))


def h4_norm(u, w, length) -> float:
    """Discrete H^4 norm on the window, Fourier weight (1 + k^2)^4."""
    n = u.size
    k = wavenumbers(n, length)
    weight = (1.0 + k**2) ** 4
    total = sum(np.sum(weight * np.abs(np.fft.fft(v) / n) ** 2) for v in (u, w))
    return float(np.sqrt(length * total))


def scalar_l2(f, length) -> float:
    return float(np.sqrt(length / f.size * np.sum(f * f)))


# ----------------------------------------------------------- perturbation
@dataclass
class PerturbationSpec:
    shape: str = "gaussian"
    amplitude: float = 1e-3
    center: float = 0.5
    width: float = 10.0
    weights: tuple = (1.0, 0.0)

    def __post_init__(self):
        if self.shape not in ("gaussian", "compact-bump"):
            raise ValueError(f"unknown perturbation shape {self.shape!r}")
        if not self.width > 0:
            raise ValueError("perturbation width must be positive")
        if not 0.0 <= self.center <= 1.0:
            raise ValueError("center is a fraction of the window in [0, 1]")

    def profile(self, x: np.ndarray, length: float) -> np.ndarray:
        z = (x - self.center * length) / self.width
        if self.shape == "gaussian":
            return np.exp(-0.5 * z * z)
        out = np.zeros_like(z)
        inside = np.abs(z) < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - z[inside] ** 2))
        return out

    def fields(self, x, length):
        p = self.amplitude * self.profile(x, length)
        return self.weights[0] * p, self.weights[1] * p

    def norms(self, x, length) -> dict:
        u, w = self.fields(x, length)
        return {"l1": l1_norm(u, w, length), "l2": l2_norm(u, w, length), "h4": h4_norm(u, w, length)}

    def support_fraction(self, length) -> float:
        """Width of the region carrying all but 1e-12 of the profile, as a window fraction."""
        half = self.width * (np.sqrt(2.0 * np.log(1e12)) if self.shape == "gaussian" else 1.0)
        return 2.0 * half / length


# -------------------------------------------------------- phase extraction
@dataclass
class PhaseField:
    t: float
    x_coarse: np.ndarray
    phi_coarse: np.ndarray
    phi: np.ndarray
    V: tuple
    flagged: np.ndarray
    taylor_order: int

    @property
    def ok(self) -> bool:
        return not self.flagged.any()


class PhaseExtractor:
    """Windowed translation-mode orthogonality, one scalar equation per coarse point.

    The phase is the local displacement of the solution against the wave,
    U(t, x) ~ Ubar(x - phi(t, x)), and V(t, x) = U(t, x + phi(t, x)) - Ubar(x).
    For a coarse point x_j the smooth window chi_j (width 2T) defines
    G_j(phi) = <chi_j (U(. + phi) - Ubar), Ubar'>, solved by safeguarded
    Newton.  U is shifted exactly (in Fourier space) by a common reference
    phase and expanded in Taylor series around it, which turns every G_j
    into a polynomial; windows whose displacement is outside the Taylor
    range are solved with exact spectral shifts instead.
    """

    def __init__(self, wave: PeriodicWave, cells: int, per_cell=8, *, tol=1e-12, max_iter=30,
                 taylor_order=24):
        self.wave = wave
        self.cells = cells
        self.T = wave.T
        self.length = cells * wave.T
        base = FieldState.from_wave(wave, cells)
        self.n = base.n
        self.dx = base.dx
        self.x = base.x
        self.k = base.k
        self.d1 = first_derivative_symbol(self.k)
        self.ubar, self.wbar = base.u, base.w
        self.ubar_x = np.fft.ifft(self.d1 * np.fft.fft(self.ubar)).real
        self.wbar_x = np.fft.ifft(self.d1 * np.fft.fft(self.wbar)).real
        self.per_cell = per_cell
        self.x_coarse = np.arange(cells * per_cell) * (self.T / per_cell)
        self.tol = tol
        self.max_iter = max_iter
        self.order = taylor_order
        # smooth periodic windows of width 2T (cos^2 bumps; they sum to a constant)
        dist = (self.x[None, :] - self.x_coarse[:, None] + 0.5 * self.length) % self.length - 0.5 * self.length
        z = dist / self.T
        chi = sparse.csr_matrix(np.where(np.abs(z) < 1.0, np.cos(0.5 * np.pi * z) ** 2, 0.0))
        self.chi = chi
        self.Wu = chi.multiply(self.ubar_x[None, :]).tocsr()
        self.Ww = chi.multiply(self.wbar_x[None, :]).tocsr()
        self.const = chi @ (self.ubar * self.ubar_x + self.wbar * self.wbar_x)

    # exact evaluation, used for windows outside the Taylor range
    def _G_exact(self, rows, uh, wh, phi):
        E = np.exp(1j * self.k[None, :] * phi[:, None]) / self.n
        Au = np.conj(np.fft.fft(self.Wu[rows].toarray(), axis=1))
        Aw = np.conj(np.fft.fft(self.Ww[rows].toarray(), axis=1))
        B = (Au * uh[None, :] + Aw * wh[None, :]) * E
        g = np.sum(B, axis=1).real - self.const[rows]
        dg = np.sum((1j * self.k)[None, :] * B, axis=1).real
        return g, dg

    def _derivative_stack(self, vh, shift):
        """Columns d^m/dx^m of v(x + shift), m = 0..order."""
        out = np.empty((self.n, self.order + 1))
        term = vh * np.exp(1j * self.k * shift)
        for m in range(self.order + 1):
            out[:, m] = np.fft.ifft(term).real
            term = term * self.d1
        return out

    def global_shift(self, u) -> float:
        """Best rigid shift of U against Ubar from the circular cross-correlation."""
        corr = np.fft.ifft(np.fft.fft(u) * np.conj(np.fft.fft(self.ubar))).real
        i = int(np.argmax(corr))
        y0, y1, y2 = corr[i - 1], corr[i], corr[(i + 1) % self.n]
        den = y0 - 2 * y1 + y2
        frac = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        s = (i + frac) * self.length / self.n
        return float((s + 0.5 * self.T) % self.T - 0.5 * self.T)

    def _newton(self, G, phi0, cap):
        phi = phi0.copy()
        done = np.zeros(phi.size, dtype=bool)
        for _ in range(self.max_iter):
            g, dg = G(phi)
            bad = dg <= 0.0  # G increases through a proper root (dG = <chi U', Ubar'> > 0)
            stepv = np.clip(np.where(bad, 0.0, -g / np.where(bad, 1.0, dg)), -cap, cap)
            phi = phi + np.where(done, 0.0, stepv)
            done |= (np.abs(stepv) <= self.tol * max(1.0, self.T)) & ~bad
            if done.all():
                break
        g, dg = G(phi)
        ok = done & (np.abs(g) <= 1e-8 * np.maximum(np.abs(dg), 1e-300))
        return phi, ok

    def extract(self, state: FieldState, seed=None) -> PhaseField:
        if state.n != self.n:
            raise ValueError("state grid does not match the extractor")
        uh, wh = np.fft.fft(state.u), np.fft.fft(state.w)
        m = self.x_coarse.size
        ref = self.global_shift(state.u) if seed is None else float(np.mean(seed))
        seed = np.full(m, ref) if seed is None else np.asarray(seed, dtype=float)
        Du = self._derivative_stack(uh, ref)
        Dw = self._derivative_stack(wh, ref)
        coef = np.asarray(self.Wu @ Du + self.Ww @ Dw)  # coef[j, m] = <chi_j Ubar', d^m U>
        fact = np.cumprod(np.r_[1.0, np.arange(1, self.order + 1)])
        poly = coef / fact[None, :]

        def G_taylor(phi):
            d = phi - ref
            powers = d[:, None] ** np.arange(self.order + 1)[None, :]
            g = np.sum(poly * powers, axis=1) - self.const
            dg = np.sum(poly[:, 1:] * np.arange(1, self.order + 1)[None, :] * powers[:, :-1], axis=1)
            return g, dg

        cap = self.T / 8.0
        phi, ok = self._newton(G_taylor, seed, cap)
        # trust the polynomial only where its last terms are negligible
        d = phi - ref
        last = np.abs(poly[:, -2:]) * np.abs(d[:, None]) ** np.arange(self.order - 1, self.order + 1)[None, :]
        scale = np.abs(poly[:, 1]) * np.maximum(np.abs(d), 1e-300)
        outside = (last.max(axis=1) > 1e-13 * np.maximum(scale, np.abs(self.const) + 1e-300)) | ~ok
        if outside.any():
            rows = np.flatnonzero(outside)
            phi_r, ok_r = self._newton(lambda p: self._G_exact(rows, uh, wh, p), seed[rows], cap)
            phi[rows] = phi_r
            ok[rows] = ok_r
        flagged = ~ok
        if flagged.any():
            warnings.warn(f"phase Newton failed in {int(flagged.sum())} windows at t={state.t}", stacklevel=2)
            good = np.flatnonzero(ok)
            if good.size == 0:
                raise ArithmeticError("phase extraction failed in every window")
            xc = self.x_coarse
            phi[flagged] = np.interp(xc[flagged], xc[good], phi[good], period=self.length)
        phi_fine = self._interpolate(phi)
        V, order = self._modulated(phi_fine, ref, Du, Dw, uh, wh)
        return PhaseField(state.t, self.x_coarse.copy(), phi, phi_fine, V, flagged, order)

    def _interpolate(self, phi_c) -> np.ndarray:
        """Trigonometric interpolation of the coarse phase onto the fine grid."""
        m = phi_c.size
        ch = np.fft.fft(phi_c)
        big = np.zeros(self.n, dtype=complex)
        half = m // 2
        big[:half] = ch[:half]
        big[self.n - half + 1 :] = ch[half + 1 :]
        if m % 2 == 0:
            big[half] = 0.5 * ch[half]
            big[self.n - half] = 0.5 * ch[half]
        else:
            big[half] = ch[half]
            big[self.n - half] = ch[m - half]
        return np.fft.ifft(big).real * (self.n / m)

    def _modulated(self, phi, ref, Du, Dw, uh, wh, tol=1e-14):
        """V = U(x + phi(x)) - Ubar(x) by Taylor series around the reference shift."""
        mean = float(np.mean(phi))
        if abs(mean - ref) > 0.25:
            ref = mean
            Du, Dw = self._derivative_stack(uh, ref), self._derivative_stack(wh, ref)
        delta = phi - ref
        out = []
        order = 0
        for D, vbar in ((Du, self.ubar), (Dw, self.wbar)):
            acc = D[:, 0].copy()
            coef = np.ones_like(delta)
            for m in range(1, self.order + 1):
                coef = coef * delta / m
                term = coef * D[:, m]
                acc += term
                if np.max(np.abs(term)) <= tol * max(1.0, np.max(np.abs(acc))):
                    order = max(order, m)
                    break
            else:
                raise ArithmeticError("phase too rough for the Taylor evaluation of U(x + phi)")
            out.append(acc - vbar)
        return tuple(out), order


# ------------------------------------------------------------------ runs
@dataclass
class ExponentFit:
    exponent: float
    ci: tuple
    intercept: float
    points: int
    t_range: tuple

    def as_dict(self) -> dict:
        return {"exponent": self.exponent, "ci95": list(self.ci), "intercept": self.intercept,
                "points": self.points, "t_range": list(self.t_range)}


SERIES = ("vt_l2", "vt_h4", "v_l2", "phi_l2", "phix_l2", "phit_l2", "vtx_inf")


@dataclass
class EvolutionRun:
    times: np.ndarray
    series: dict
    perturbation: PerturbationSpec
    initial_norms: dict
    meta: dict = field(default_factory=dict)
    blowup: bool = False
    message: str = ""
    phase_ok: np.ndarray | None = None
    snapshots: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    damping: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        keys = [s for s in SERIES if s in self.series]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *keys])
            for i, t in enumerate(self.times):
                writer.writerow([repr(float(t))] + [repr(float(self.series[s][i])) for s in keys])

    def report(self) -> dict:
        return {
            "meta": self.meta,
            "blowup": self.blowup,
            "message": self.message,
            "initial_norms": self.initial_norms,
            "fits": {k: v.as_dict() for k, v in self.fits.items()},
            "damping": {k: v for k, v in self.damping.items() if k not in ("C_running",)},
            "norms": "H4 is the discrete window norm with Fourier weight (1 + k^2)^4",
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)


def group_speed_guard(length: float, b: float, width: float) -> float:
    """Time for a signal moving at speed |b| to cross half the window (minus its half width)."""
    if b == 0:
        return np.inf
    return max(0.0, 0.5 * length - width) / abs(b)


def run_experiment(wave: PeriodicWave, spec: PerturbationSpec, t_end: float, sampling: float, *,
                   cells=40, dt=0.25, eps0=1.0, phase=True, b=None, snapshot_times=(),
                   blowup_level=10.0) -> EvolutionRun:
    """Evolve Ubar + V0 on a ``cells``-cell window and record the norm series at ``sampling`` spacing."""
    if cells < 1:
        raise ValueError("cells must be positive")
    base = FieldState.from_wave(wave, cells)
    x, length = base.x, base.length
    V0u, V0w = spec.fields(x, length)
    init = spec.norms(x, length)
    if init["h4"] > eps0:
        raise SmallnessError(f"|V0|_H4 = {init['h4']:.3g} exceeds the smallness proxy {eps0}")
    every = max(1, int(round(sampling / dt)))
    nsteps = int(round(t_end / dt))
    meta = {"T": wave.T, "cells": cells, "length": length, "n": base.n, "dt": dt, "t_end": nsteps * dt,
            "sample_every": every * dt, "c": wave.params.c, "epsilon": wave.params.epsilon,
            "gamma": wave.params.gamma, "a": wave.params.a, "scheme": "ARS(2,2,2) IMEX, dealiased cubic",
            "wave_h4": h4_norm(base.u, base.w, length)}
    if b is not None:
        meta["wrap_guard_time"] = group_speed_guard(length, b, spec.width)
    state = FieldState(base.u + V0u, base.w + V0w, 0.0, base.params, length, cells)
    extractor = PhaseExtractor(wave, cells) if phase else None
    times, rows, phase_ok, phis = [], {s: [] for s in SERIES}, [], []
    snaps = {}
    snap_steps = {int(round(ts / dt)): ts for ts in snapshot_times}
    blowup, message = False, ""
    seed = None

    def record(st):
        nonlocal seed
        du, dw = st.u - base.u, st.w - base.w
        times.append(st.t)
        rows["vt_l2"].append(l2_norm(du, dw, length))
        rows["vt_h4"].append(h4_norm(du, dw, length))
        dux = np.fft.ifft(first_derivative_symbol(st.k) * np.fft.fft(du)).real
        dwx = np.fft.ifft(first_derivative_symbol(st.k) * np.fft.fft(dw)).real
        rows["vtx_inf"].append(float(max(np.abs(dux).max(), np.abs(dwx).max())))
        if extractor is None:
            return
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                pf = extractor.extract(st, seed)
            ok = pf.ok and not caught
            seed = pf.phi_coarse
            rows["v_l2"].append(l2_norm(pf.V[0], pf.V[1], length))
            rows["phi_l2"].append(scalar_l2(pf.phi, length))
            phix = np.fft.ifft(first_derivative_symbol(st.k) * np.fft.fft(pf.phi)).real
            rows["phix_l2"].append(scalar_l2(phix, length))
            phis.append(pf.phi)
        except ArithmeticError as exc:
            ok = False
            logger.warning("phase extraction failed at t=%g: %s", st.t, exc)
            for s in ("v_l2", "phi_l2", "phix_l2"):
                rows[s].append(np.nan)
            phis.append(None)
        phase_ok.append(ok)

    record(state)
    for i in range(1, nsteps + 1):
        try:
            state = step(state, dt)
        except (BlowupError, StabilityError) as exc:
            blowup, message = True, f"terminated at t={state.t:.6g}: {exc}"
            break
        if i in snap_steps:
            snaps[snap_steps[i]] = state.copy()
        if i % every == 0 or i == nsteps:
            record(state)
            if not np.isfinite(rows["vt_l2"][-1]) or rows["vt_l2"][-1] > blowup_level * max(init["l2"], 1e-300):
                if rows["vt_l2"][-1] > blowup_level * max(init["l2"], 1e-300) and init["l2"] > 0:
                    blowup, message = True, f"perturbation grew {blowup_level}x at t={state.t:.6g}"
                    break
    times_a = np.array(times)
    series = {s: np.array(v, dtype=float) for s, v in rows.items() if len(v) == len(times)}
    if extractor is not None and len(phis) == len(times):
        series["phit_l2"] = _phase_time_derivative(times_a, phis, length)
    run = EvolutionRun(times=times_a, series=series, perturbation=spec, initial_norms=init, meta=meta,
                       blowup=blowup, message=message,
                       phase_ok=np.array(phase_ok) if phase_ok else None, snapshots=snaps)
    run.meta["h4_norm"] = "discrete window norm, Fourier weight (1 + k^2)^4"
    return run


def _phase_time_derivative(times, phis, length) -> np.ndarray:
    """|phi_t|_L2 by centred differences between samples (one-sided at the ends)."""
    out = np.full(times.size, np.nan)
    for i in range(times.size):
        lo, hi = max(0, i - 1), min(times.size - 1, i + 1)
        if hi == lo or phis[lo] is None or phis[hi] is None:
            continue
        out[i] = scalar_l2((phis[hi] - phis[lo]) / (times[hi] - times[lo]), length)
    return out


def run_many(wave, specs, t_end, sampling, *, threads=1, **kwargs) -> list:
    """Independent runs (e.g. an amplitude sweep), concurrently."""
    def one(spec):
        return run_experiment(wave, spec, t_end, sampling, **kwargs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, specs))
    return [one(s) for s in specs]


# ------------------------------------------------------------------ fits
def fit_exponent(times, values, *, t_min=10.0, tail_fraction=0.1, min_points=5) -> ExponentFit:
    """Least-squares exponent of values ~ A (1 + t)^p, with a 95% confidence interval.

    Samples with t < t_min (transient) and the last ``tail_fraction`` of the
    time range (wrap-around guard) are excluded.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    t_max = times[-1] - tail_fraction * (times[-1] - times[0])
    keep = (times >= t_min) & (times <= t_max) & np.isfinite(values) & (values > 0)
    if keep.sum() < min_points:
        raise ValueError(f"insufficient samples for an exponent fit ({int(keep.sum())} < {min_points})")
    X = np.log1p(times[keep])
    Y = np.log(values[keep])
    res = stats.linregress(X, Y)
    m = int(keep.sum())
    half = float(stats.t.ppf(0.975, m - 2) * res.stderr) if m > 2 else np.inf
    return ExponentFit(float(res.slope), (float(res.slope - half), float(res.slope + half)),
                       float(res.intercept), m, (float(times[keep][0]), float(times[keep][-1])))


def modulated_decay_report(run: EvolutionRun, *, t_min=10.0, tail_fraction=0.1, min_phase_fraction=0.9) -> dict:
    """Exponent fits for the unmodulated and modulated norms and the phase derivatives."""
    if run.phase_ok is None or run.phase_ok.size == 0:
        raise ValueError("run has no phase extraction")
    frac = float(np.mean(run.phase_ok))
    if frac < min_phase_fraction:
        raise ValueError(f"phase extraction succeeded at only {frac:.0%} of samples")
    fits = {}
    for s in ("vt_l2", "v_l2", "phi_l2", "phix_l2", "phit_l2"):
        if s in run.series:
            fits[s] = fit_exponent(run.times, run.series[s], t_min=t_min, tail_fraction=tail_fraction)
    run.fits.update(fits)
    out = {k: v.as_dict() for k, v in fits.items()}
    out["phase_success_fraction"] = frac
    out["guards"] = {"t_min": t_min, "tail_fraction": tail_fraction}
    if "vt_l2" in fits and "v_l2" in fits:
        out["separation"] = fits["vt_l2"].exponent - fits["v_l2"].exponent
    return out


def phase_consistency(run: EvolutionRun, wave: PeriodicWave) -> np.ndarray:
    """Slack of |Vt| <= |V| + (max|Ubar_x| + |Vt_x|_inf) |phi| at each sample (>= 0 when it holds)."""
    ux, wx = wave.derivative()
    ubx = float(max(np.abs(ux).max(), np.abs(wx).max()))
    s = run.series
    return s["v_l2"] + (ubx + s["vtx_inf"]) * s["phi_l2"] - s["vt_l2"]


# --------------------------------------------------------------- damping
def damping_check(run: EvolutionRun, *, rel_tol=1e-2, noise=1e-9) -> dict:
    """Smallest constant C(t*) with, for all t <= t*,

        |Vt(t)|_H4^2 <= e^{-eps gamma t} |V0|_H4^2 + C int_0^t e^{-eps gamma (t - s)} |Vt(s)|_L2^2 ds.

    A uniform constant exists when C(t*) stops growing: the running
    maximum over the second half of the run must not exceed the value at
    mid-run by more than ``rel_tol``.  Otherwise the first time the mid-run
    constant is violated is recorded.  Excess H4^2 below
    (``noise`` |Ubar|_H4)^2 is rounding noise of the wave fields and
    imposes nothing.
    """
    t = run.times
    rate = run.meta["epsilon"] * run.meta["gamma"]
    h4 = run.series["vt_h4"] ** 2
    l2 = run.series["vt_l2"] ** 2
    dts = np.diff(t)
    if dts.size and dts.max() > 0.1 / rate + 1e-12:
        raise ValueError(f"sampling interval {dts.max():.3g} too coarse for the quadrature (max {0.1 / rate:.3g})")
    # I(t) = int_0^t e^{-rate (t - s)} l2(s) ds, trapezoid on the weighted integrand, recursively
    integ = np.zeros(t.size)
    for i in range(1, t.size):
        h = t[i] - t[i - 1]
        decay = np.exp(-rate * h)
        integ[i] = decay * integ[i - 1] + 0.5 * h * (decay * l2[i - 1] + l2[i])
    excess = h4 - np.exp(-rate * (t - t[0])) * h4[0]
    need = np.zeros(t.size)
    floor = (noise * run.meta.get("wave_h4", 0.0)) ** 2
    pos = excess > floor
    with np.errstate(divide="ignore", invalid="ignore"):
        need[pos] = np.where(integ[pos] > 0, excess[pos] / integ[pos], np.inf)
    running = np.maximum.accumulate(need)
    C = float(running[-1])
    mid = int(np.searchsorted(t, t[0] + 0.5 * (t[-1] - t[0])))
    C_mid = float(running[mid])
    uniform = bool(np.isfinite(C) and C <= (1.0 + rel_tol) * C_mid + 1e-300)
    first_violation = None
    if not uniform:
        viol = np.flatnonzero(need > (1.0 + rel_tol) * C_mid)
        first_violation = float(t[viol[0]]) if viol.size else None
    result = {"C": C, "C_mid": C_mid, "uniform": uniform, "first_violation_time": first_violation,
              "rate": rate, "C_running": running}
    run.damping = result
    return result


# ------------------------------------------------------------ diagnostics
def temporal_order(state: FieldState, t_end: float, dt: float) -> dict:
    """Self-convergence ratio |u_dt - u_dt/2| / |u_dt/2 - u_dt/4| (about 4 for second order)."""
    sols = []
    for h in (dt, dt / 2, dt / 4):
        steps = int(round(t_end / h))
        s = integrate(state.copy(), h, steps)
        sols.append(np.concatenate([s.u, s.w]))
    e1 = np.linalg.norm(sols[0] - sols[1])
    e2 = np.linalg.norm(sols[1] - sols[2])
    return {"e_coarse": float(e1), "e_fine": float(e2), "ratio": float(e1 / e2)}


def refine_wave(wave: PeriodicWave, factor: int = 2) -> PeriodicWave:
    """Spectral prolongation of the wave to a finer grid, re-polished there."""
    from .wave import polish_wave

    n = wave.n
    m = factor * n
    fields_ = []
    for v in (wave.u, wave.w):
        vh = np.fft.fft(v)
        big = np.zeros(m, dtype=complex)
        half = n // 2
        big[:half] = vh[:half]
        big[m - half + 1 :] = vh[half + 1 :]
        big[half] = 0.5 * vh[half]
        big[m - half] = 0.5 * vh[half]
        fields_.append(np.fft.ifft(big).real * factor)
    fine = PeriodicWave(wave.T, fields_[0], fields_[1], wave.params)
    return polish_wave(fine)


def save_snapshot(state: FieldState, path) -> None:
    """Field snapshot in the same '# key: value' text layout as orbit profiles."""
    p = state.params
    lines = [
        "# format: fhnloop-field-1",
        f"# t: {float(state.t)!r}",
        f"# a: {float(p.a)!r}",
        f"# gamma: {float(p.gamma)!r}",
        f"# epsilon: {float(p.epsilon)!r}",
        f"# c: {float(p.c)!r}",
        f"# length: {float(state.length)!r}",
        f"# cells: {state.cells}",
        f"# N: {state.n}",
        "# columns: x u w",
    ]
    for x, u, w in zip(state.x, state.u, state.w):
        lines.append(f"{float(x)!r} {float(u)!r} {float(w)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshot(path) -> FieldState:
    header, rows = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
            elif line.strip():
                rows.append([float(v) for v in line.split()])
    if header.get("format") != "fhnloop-field-1":
        raise ValueError(f"{path}: not a field snapshot")
    data = np.array(rows)
    prm = ModelParams(a=float(header["a"]), gamma=float(header["gamma"]), epsilon=float(header["epsilon"]),
                      c=float(header["c"]))
    return FieldState(data[:, 1].copy(), data[:, 2].copy(), float(header["t"]), prm, float(header["length"]),
                      int(header["cells"]))
