"""Fourier representation of a periodic travelling wave on one cell.

The collocation orbit is resampled on a uniform grid and polished by Newton
on the pseudo-spectral steady-state equations of the co-moving PDE, with the
speed as an extra unknown.  The polished wave is then an exact discrete
steady state of the same right-hand side used by the time stepper, and its
Fourier coefficients feed Hill's method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .collocation import ConvergenceError
from .model import ModelParams, reaction, reaction_deriv


def wavenumbers(n: int, length: float) -> np.ndarray:
    return 2.0 * np.pi * np.fft.fftfreq(n, d=length / n)


def first_derivative_symbol(k: np.ndarray) -> np.ndarray:
    """i k with the unpaired Nyquist mode removed (keeps derivatives of real fields real)."""
    k1 = k.copy()
    if k.size % 2 == 0:
        k1[k.size // 2] = 0.0
    return 1j * k1


def dealiased_reaction(u: np.ndarray, a: float, pad: int = 2) -> np.ndarray:
    """f(u) with the cubic evaluated on a zero-padded grid, then truncated."""
    n = u.size
    m = pad * n
    uh = np.fft.rfft(u)
    half = n // 2
    big = np.zeros(m // 2 + 1, dtype=complex)
    big[: half + 1] = uh[: half + 1]
    if n % 2 == 0:
        # Nyquist mode split evenly between +-half keeps the padded field real
        big[half] *= 0.5
    ub = np.fft.irfft(big, m) * pad
    fb = np.fft.rfft(reaction(ub, a)) / pad
    out = fb[: n // 2 + 1].copy()
    if n % 2 == 0:
        out[half] = 0.0
    return np.fft.irfft(out, n)


def steady_residual(u, w, c, params: ModelParams, k, dealias=True):
    """Right-hand side of the co-moving PDE at (u, w)."""
    uh, wh = np.fft.fft(u), np.fft.fft(w)
    uxx = np.fft.ifft(-(k**2) * uh).real
    d1 = first_derivative_symbol(k)
    ux = np.fft.ifft(d1 * uh).real
    wx = np.fft.ifft(d1 * wh).real
    fu = dealiased_reaction(u, params.a) if dealias else reaction(u, params.a)
    ru = uxx - c * ux + fu - w
    rw = -c * wx + params.epsilon * (u - params.gamma * w)
    return ru, rw


def fourier_diff_matrices(n: int, length: float):
    """Dense first and second spectral differentiation matrices (Nyquist mode removed)."""
    k = wavenumbers(n, length)
    F = np.fft.fft(np.eye(n), axis=0)
    Finv = np.fft.ifft(np.eye(n), axis=0)
    D1 = (Finv @ (first_derivative_symbol(k)[:, None] * F)).real
    D2 = (Finv @ (-(k**2)[:, None] * F)).real
    return D1, D2


@dataclass
class PeriodicWave:
    """Uniformly sampled periodic wave (u, w) on [0, T) with its speed."""

    T: float
    u: np.ndarray
    w: np.ndarray
    params: ModelParams
    residual: float = np.nan
    newton_iterations: int = 0

    @property
    def n(self) -> int:
        return self.u.size

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.n) * (self.T / self.n)

    @property
    def k(self) -> np.ndarray:
        return wavenumbers(self.n, self.T)

    def derivative(self) -> tuple[np.ndarray, np.ndarray]:
        d1 = first_derivative_symbol(self.k)
        ux = np.fft.ifft(d1 * np.fft.fft(self.u)).real
        wx = np.fft.ifft(d1 * np.fft.fft(self.w)).real
        return ux, wx

    def coefficients(self, which="u") -> np.ndarray:
        """Fourier coefficients in fftfreq order, normalised so f(x) = sum c_k e^{i q_k x}."""
        return np.fft.fft(self.u if which == "u" else self.w) / self.n

    def tail(self, K: int) -> float:
        """Largest relative Fourier coefficient of u and w beyond mode K."""
        out = 0.0
        for field_ in (self.u, self.w):
            ch = np.abs(np.fft.fft(field_)) / self.n
            idx = np.abs(np.fft.fftfreq(self.n, d=1.0 / self.n))
            scale = max(ch.max(), 1e-300)
            if np.any(idx > K):
                out = max(out, float(ch[idx > K].max() / scale))
        return out

    def resolution_tail(self) -> float:
        """Relative size of the coefficients in the top sixth of the spectrum."""
        return self.tail(int(self.n // 2 * 5 // 6))

    def translate(self, s: float) -> "PeriodicWave":
        """Rigid translate x -> x - s of the wave (spectrally exact)."""
        ph = np.exp(-1j * self.k * s)
        u = np.fft.ifft(np.fft.fft(self.u) * ph).real
        w = np.fft.ifft(np.fft.fft(self.w) * ph).real
        return PeriodicWave(self.T, u, w, self.params, self.residual, self.newton_iterations)

    def tiled(self, cells: int) -> tuple[np.ndarray, np.ndarray]:
        return np.tile(self.u, cells), np.tile(self.w, cells)

    def residual_norm(self, dealias=True) -> float:
        ru, rw = steady_residual(self.u, self.w, self.params.c, self.params, self.k, dealias)
        return float(max(np.abs(ru).max(), np.abs(rw).max()))


def points_for_period(T: float, per_unit: float = 2.6) -> int:
    n = int(np.ceil(per_unit * T))
    return n + (n % 2)


def wave_from_orbit(orbit, n: int | None = None, *, polish=True, tol=1e-12, max_iter=30) -> PeriodicWave:
    """Resample a periodic collocation orbit on a uniform grid and polish it.

    The cell starts at the left end of the orbit's mesh; the orbit's period
    is ``mesh[-1] - mesh[0]``.
    """
    x0, x1 = orbit.interval
    T = x1 - x0
    n = n or points_for_period(T)
    x = x0 + np.arange(n) * (T / n)
    y = orbit(x)
    wave = PeriodicWave(T=T, u=y[0].copy(), w=y[2].copy(), params=orbit.params)
    if polish:
        wave = polish_wave(wave, tol=tol, max_iter=max_iter)
    return wave


def polish_wave(wave: PeriodicWave, *, tol=1e-12, max_iter=30) -> PeriodicWave:
    """Newton on the dealiased pseudo-spectral steady state, unknowns (u, w, c).

    The phase is fixed by orthogonality of the correction to the translation
    mode of the starting profile.  The Jacobian ignores the (tiny) effect of
    dealiasing, so convergence is fast-linear rather than quadratic once the
    wave is resolved.
    """
    n, T, prm = wave.n, wave.T, wave.params
    k = wavenumbers(n, T)
    D1, D2 = fourier_diff_matrices(n, T)
    u, w, c = wave.u.copy(), wave.w.copy(), prm.c
    u_ref = u.copy()
    ux_ref = np.fft.ifft(first_derivative_symbol(k) * np.fft.fft(u_ref)).real
    ux_ref /= np.linalg.norm(ux_ref)
    eye = np.eye(n)
    res = np.inf
    for it in range(max_iter + 1):
        p = prm.replace(c=c)
        ru, rw = steady_residual(u, w, c, p, k)
        phase = float(ux_ref @ (u - u_ref))
        res = max(np.abs(ru).max(), np.abs(rw).max(), abs(phase))
        if res <= tol:
            break
        if it == max_iter:
            raise ConvergenceError(f"wave polish did not converge: residual {res:.3e}")
        ux = D1 @ u
        wx = D1 @ w
        J = np.zeros((2 * n + 1, 2 * n + 1))
        J[:n, :n] = D2 - c * D1 + np.diag(reaction_deriv(u, prm.a))
        J[:n, n : 2 * n] = -eye
        J[:n, 2 * n] = -ux
        J[n : 2 * n, :n] = prm.epsilon * eye
        J[n : 2 * n, n : 2 * n] = -c * D1 - prm.epsilon * prm.gamma * eye
        J[n : 2 * n, 2 * n] = -wx
        J[2 * n, :n] = ux_ref
        rhs = -np.concatenate([ru, rw, [phase]])
        dz = sla.solve(J, rhs)
        u = u + dz[:n]
        w = w + dz[n : 2 * n]
        c = c + dz[2 * n]
    return PeriodicWave(T=T, u=u, w=w, params=prm.replace(c=c), residual=float(res), newton_iterations=it)
