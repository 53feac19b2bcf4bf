"""Floquet-Bloch spectrum of the linearisation about a periodic wave (Hill's method).

On one cell of length T the Bloch operator acting on (u, w) is
``[[(d + i xi)^2 - c (d + i xi) + f'(phi), -1], [eps, -c (d + i xi) - eps gamma]]``
and is represented exactly in the Fourier basis e^{i q_k x}, q_k = 2 pi k / T,
|k| <= K, with multiplication by f'(phi) becoming a Toeplitz convolution.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .model import reaction_deriv
from .wave import PeriodicWave

logger = logging.getLogger(__name__)


class UnresolvedWaveError(ValueError):
    """Wave's Fourier tail is too large for the requested truncation."""


def default_modes(T: float) -> int:
    """Fourier truncation proportional to the period (resolves the fast layers)."""
    return int(np.ceil(0.85 * T))


def deriv_coefficients(wave: PeriodicWave, K: int) -> np.ndarray:
    """Coefficients a_m, |m| <= 2K, of f'(phi(x)) = sum a_m e^{i q_m x} (index m + 2K)."""
    n = wave.n
    P = 2 * max(n, 4 * K + 2)
    uh = np.fft.fft(wave.u) / n
    big = np.zeros(P, dtype=complex)
    half = n // 2
    big[:half] = uh[:half]
    big[P - half + 1 :] = uh[half + 1 :]
    big[half] = 0.5 * uh[half]
    big[P - half] = 0.5 * uh[half]
    phi = np.fft.ifft(big).real * P
    coef = np.fft.fft(reaction_deriv(phi, wave.params.a)) / P
    m = np.arange(-2 * K, 2 * K + 1)
    return coef[m % P]


@dataclass
class BlochOperatorDisc:
    xi: float
    K: int
    matrix: np.ndarray
    wave: PeriodicWave

    @property
    def modes(self) -> int:
        return 2 * self.K + 1

    @property
    def q(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(-self.K, self.K + 1) / self.wave.T


def assemble_bloch(xi: float, wave: PeriodicWave, K: int | None = None, *, coeffs=None,
                   tail_tol=1e-10) -> BlochOperatorDisc:
    """Dense Hill matrix of size 2(2K+1) for the Bloch parameter ``xi``."""
    K = default_modes(wave.T) if K is None else int(K)
    tail = wave.tail(K)
    if tail > tail_tol:
        raise UnresolvedWaveError(f"wave Fourier tail {tail:.2e} beyond mode {K} exceeds {tail_tol:.0e}")
    prm = wave.params
    if coeffs is None:
        coeffs = deriv_coefficients(wave, K)
    m = 2 * K + 1
    q = 2.0 * np.pi * np.arange(-K, K + 1) / wave.T + xi
    idx = np.arange(m)
    conv = coeffs[(idx[:, None] - idx[None, :]) + 2 * K]
    A = np.zeros((2 * m, 2 * m), dtype=complex)
    A[:m, :m] = conv + np.diag(-(q**2) - 1j * prm.c * q)
    A[:m, m:] = -np.eye(m)
    A[m:, :m] = prm.epsilon * np.eye(m)
    A[m:, m:] = np.diag(-1j * prm.c * q - prm.epsilon * prm.gamma)
    return BlochOperatorDisc(xi=float(xi), K=K, matrix=A, wave=wave)


def translation_mode_coefficients(wave: PeriodicWave, K: int) -> np.ndarray:
    """Fourier coefficients (|k| <= K) of the wave derivative (u', w'), stacked."""
    ux, wx = wave.derivative()
    n = wave.n
    k = np.arange(-K, K + 1)
    return np.concatenate([(np.fft.fft(ux) / n)[k % n], (np.fft.fft(wx) / n)[k % n]])


def translation_residual(wave: PeriodicWave, K: int | None = None) -> tuple[float, float]:
    """(|L_0 U'|, |U'|) in the Fourier coefficient norm."""
    K = default_modes(wave.T) if K is None else K
    op = assemble_bloch(0.0, wave, K)
    v = translation_mode_coefficients(wave, K)
    return float(np.linalg.norm(op.matrix @ v)), float(np.linalg.norm(v))


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between complex lines spanned by a and b."""
    cosv = abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(min(1.0, cosv)))


@dataclass
class SpectralSweep:
    T: float
    K: int
    xi_grid: np.ndarray
    eigenvalues: list
    lambda_c: np.ndarray
    eigvecs_c: list
    translation_mode: np.ndarray
    b: float = np.nan
    d: float = np.nan
    fit_residual: float = np.nan
    report: dict = field(default_factory=dict)
    jumps: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["xi", "re_lambda_c", "im_lambda_c", "spectral_gap"])
            for xi, lam, gap in zip(self.xi_grid, self.lambda_c, self.report.get("gaps", [])):
                writer.writerow([repr(float(xi)), repr(float(lam.real)), repr(float(lam.imag)), repr(float(gap))])

    def report_json(self) -> str:
        rep = {k: v for k, v in self.report.items() if k != "gaps"}
        return json.dumps(rep, indent=2, sort_keys=True)


def _eig(op: BlochOperatorDisc, vectors: bool):
    if vectors:
        vals, vecs = sla.eig(op.matrix, check_finite=False)
        return vals, vecs
    return sla.eigvals(op.matrix, check_finite=False), None


def xi_grid(T: float, count: int) -> np.ndarray:
    """Uniform odd-count grid on (-pi/T, pi/T) containing 0 and symmetric pairs."""
    if count % 2 == 0 or count < 3:
        raise ValueError("xi grid count must be odd and at least 3")
    half = count // 2
    return np.pi / T * np.arange(-half, half + 1) / (half + 0.5)


def bulk_gap(vals: np.ndarray, cluster_max: int = 8) -> float:
    """Distance from 0 to the spectrum outside the cluster of small eigenvalues.

    Interface (translation-like) eigenvalues of a wave built from several
    fronts are exponentially small in the period; the cluster is closed at
    the largest ratio between consecutive sorted moduli.
    """
    mods = np.sort(np.abs(vals))[: cluster_max + 1]
    ratios = mods[1:] / np.maximum(mods[:-1], 1e-300)
    cut = int(np.argmax(ratios)) + 1
    return float(mods[cut])


def critical_index(vals: np.ndarray, radius: float, previous=None) -> int:
    """Eigenvalue of maximal real part within |lambda| <= radius (closest to
    ``previous`` when continuing along the grid)."""
    near = np.flatnonzero(np.abs(vals) <= radius)
    if near.size == 0:
        near = np.array([int(np.argmin(np.abs(vals)))])
    if previous is not None:
        return int(near[np.argmin(np.abs(vals[near] - previous))])
    return int(near[np.argmax(vals[near].real)])


def sweep(wave: PeriodicWave, xi_count: int = 33, K: int | None = None, *, threads: int = 1,
          radius: float | None = None, fit_fraction: float = 0.25) -> SpectralSweep:
    """Full spectra on a xi-grid, critical curve and the stability certificate."""
    if xi_count < 33 or xi_count % 2 == 0:
        raise ValueError("xi_count must be odd and at least 33")
    T = wave.T
    K = default_modes(T) if K is None else int(K)
    coeffs = deriv_coefficients(wave, K)
    grid = xi_grid(T, xi_count)

    def solve(xi):
        op = assemble_bloch(xi, wave, K, coeffs=coeffs)
        return _eig(op, vectors=True)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve, grid))
    else:
        results = [solve(xi) for xi in grid]

    i0 = xi_count // 2
    vals0 = results[i0][0]
    gap0 = bulk_gap(vals0)
    radius = 0.1 * gap0 if radius is None else radius

    lam_c = np.empty(xi_count, dtype=complex)
    vecs_c = [None] * xi_count
    gaps = np.empty(xi_count)
    idx0 = critical_index(vals0, radius)
    lam_c[i0] = vals0[idx0]
    vecs_c[i0] = results[i0][1][:, idx0]
    jumps = []
    for direction in (1, -1):
        prev = lam_c[i0]
        j = i0 + direction
        while 0 <= j < xi_count:
            vals, vecs = results[j]
            idx = critical_index(vals, radius, previous=prev)
            step = abs(vals[idx] - prev)
            spacing = np.sort(np.abs(vals - prev))[1] if vals.size > 1 else np.inf
            if step > 0.5 * spacing:
                jumps.append(float(grid[j]))
            lam_c[j] = vals[idx]
            vecs_c[j] = vecs[:, idx]
            prev = lam_c[j]
            j += direction
    for j, (vals, _) in enumerate(results):
        others = np.delete(vals, np.argmin(np.abs(vals - lam_c[j])))
        gaps[j] = float(-others.real.max())

    mode = translation_mode_coefficients(wave, K)
    sw = SpectralSweep(
        T=T, K=K, xi_grid=grid, eigenvalues=[r[0] for r in results], lambda_c=lam_c,
        eigvecs_c=vecs_c, translation_mode=mode, jumps=jumps,
    )
    from .evans import fit_tangency

    small = np.abs(grid) <= fit_fraction * np.pi / T + 1e-15
    fit = fit_tangency(grid[small], lam_c[small])
    sw.b, sw.d, sw.fit_residual = fit.b, fit.d, fit.residual
    sw.report = certify(sw, gaps, vals0, idx0)
    return sw


def certify(sw: SpectralSweep, gaps, vals0, idx0) -> dict:
    """The three conditions of diffusive spectral stability, with measured constants."""
    grid, lam = sw.xi_grid, sw.lambda_c
    nonzero = grid != 0
    max_re = np.array([v.real.max() for v in sw.eigenvalues])
    others0 = np.delete(vals0, idx0)
    cond1 = bool(np.all(max_re[nonzero] < 0) and np.all(others0.real < 0))
    theta = float(np.min(-max_re[nonzero] / grid[nonzero] ** 2))
    cond2 = theta > 0
    lam0 = vals0[idx0]
    second = float(np.min(np.abs(others0)))
    angle = _angle(sw.eigvecs_c[int(np.flatnonzero(grid == 0)[0])], sw.translation_mode)
    cond3 = bool(abs(lam0) <= 1e-8 and second >= 1e3 * max(abs(lam0), 1e-300) and angle <= 1e-4)
    delta0 = float(-max(np.delete(v, np.argmin(np.abs(v - l))).real.max() for v, l in zip(sw.eigenvalues, lam)))
    conj_err = float(np.max(np.abs(lam - np.conj(lam[::-1]))))
    return {
        "T": float(sw.T),
        "K": int(sw.K),
        "xi_count": int(grid.size),
        "cond1_left_half_plane": cond1,
        "cond2_quadratic_bound": bool(cond2),
        "cond3_simple_translation_zero": cond3,
        "certified": bool(cond1 and cond2 and cond3),
        "theta": theta,
        "delta0_gap_rest": delta0,
        "lambda0_abs": float(abs(lam0)),
        "second_eigenvalue_abs": second,
        "translation_angle": angle,
        "b": float(sw.b),
        "d": float(sw.d),
        "fit_residual": float(sw.fit_residual),
        "conjugate_symmetry_error": conj_err,
        "max_abs_lambda_c": float(np.max(np.abs(lam))),
        "continuity_jumps": list(sw.jumps),
        "gaps": [float(g) for g in gaps],
    }


def spectrum_set_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Hausdorff distance between two finite eigenvalue sets."""
    d = np.abs(a[:, None] - b[None, :])
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


# ------------------------------------------------------------ Bloch transform
def bloch_transform(g: np.ndarray, T: float, cells: int) -> tuple[np.ndarray, np.ndarray]:
    """Discrete Bloch transform of samples of g on a window of ``cells`` cells.

    Returns xi values (cells of them in [-pi/T, pi/T)) and the T-periodic
    profiles check_g(xi, x) on one cell, with
    check_g(xi, x) = T * sum_n e^{-i xi (x - n T)} g(x - n T)   (window periodic).
    """
    g = np.asarray(g)
    n_total = g.size
    if n_total % cells:
        raise ValueError("sample count must be a multiple of the cell count")
    m = n_total // cells
    x = np.arange(m) * (T / m)
    blocks = g.reshape(cells, m)  # row n holds g(x + nT)
    j = np.arange(cells)
    xi = 2.0 * np.pi / (cells * T) * (((j + cells // 2) % cells) - cells // 2)
    order = np.argsort(xi)
    xi = xi[order]
    # sum over shifts: g(x - nT) for n = -(cells-1)..0 is periodic-window row (-n mod cells)
    out = np.empty((cells, m), dtype=complex)
    shifts = np.arange(cells)
    for r, xv in enumerate(xi):
        phase = np.exp(-1j * xv * (x[None, :] + shifts[:, None] * T))
        out[r] = T * np.sum(phase * blocks, axis=0)
    return xi, out


def bloch_parseval_check(g: np.ndarray, T: float, cells: int, *, tail_tol=1e-8) -> dict:
    """Compare ||g||^2_{L2} with (1 / (2 pi T)) ||check g||^2 on the discrete window."""
    g = np.asarray(g)
    m = g.size // cells
    dx = T / m
    edge = max(1, m // 2)
    total = float(np.sum(np.abs(g) ** 2))
    tail = float(np.sum(np.abs(g[:edge]) ** 2) + np.sum(np.abs(g[-edge:]) ** 2))
    if total > 0 and tail > tail_tol * total:
        raise ValueError(f"sample function not decayed inside the window (edge mass {tail / total:.2e})")
    xi, gc = bloch_transform(g, T, cells)
    lhs = total * dx
    dxi = 2.0 * np.pi / (cells * T)
    rhs = float(np.sum(np.abs(gc) ** 2)) * dx * dxi / (2.0 * np.pi * T)
    rel = abs(lhs - rhs) / lhs if lhs > 0 else abs(lhs - rhs)
    return {"lhs": lhs, "rhs": rhs, "relative_error": rel, "xi": xi, "transform": gc}


# ------------------------------------------------------------ scaling study
@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residuals: np.ndarray
    passage: np.ndarray
    log_max: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals)))


def exponential_scaling_study(passage_lengths, sweeps) -> ScalingFit:
    """Regress ln max_xi |lambda_c| on L1 + L2."""
    passage = np.asarray(passage_lengths, dtype=float)
    if len(sweeps) < 3 or passage.size < 3:
        raise ValueError("need at least three converged sweeps for the scaling fit")
    logs = np.array([np.log(np.max(np.abs(sw.lambda_c))) for sw in sweeps])
    slope, intercept = np.polyfit(passage, logs, 1)
    resid = logs - (slope * passage + intercept)
    return ScalingFit(float(slope), float(intercept), resid, passage, logs)
