"""Reduced eigenvalue determinant near a heteroclinic loop and its critical curve.

For a periodic orbit of period T = 2 (L1 + L2) glued from the front h1 and
the back h2, small Bloch eigenvalues solve E(lambda, xi) = 0 with

    E = (1 - e^{i xi T}) p21 p12m + (1 - e^{-i xi T}) p1m p2m
        - (p2m - p21) lambda M1 - (p1m - p12m) lambda M2,

where p21 = <psi2(L2), h1'(-L1)>, p12m = <psi1(L1), h2'(-L2)>,
p1m = <psi1(-L1), h2'(L2)>, p2m = <psi2(-L2), h1'(L1)>.  Replacing the
products by their leading asymptotics S_i, U_i gives closed forms for the
root lambda(xi).
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

CASES = ("general", "equal_leading_rates", "dominated_rate")


class DenominatorError(ValueError):
    """The lambda-coefficient of the reduced determinant is (nearly) zero."""


class FitError(ValueError):
    """Tangency fit is ill-posed or its residual is above threshold."""


@dataclass
class ReducedEvansData:
    T: float
    p21: float
    p12m: float
    p1m: float
    p2m: float
    M1: float
    M2: float
    S1: float
    S2: float
    U1: float
    U2: float
    L1: float = np.nan
    L2: float = np.nan
    rates: dict = field(default_factory=dict)
    pairings: dict = field(default_factory=dict)
    case_tag: str = "general"
    gray_zone: bool = False

    @classmethod
    def from_components(cls, products, melnikov, case_tag=None, *, equal_tol=0.05, gray=0.02):
        data = cls(
            T=products.T, p21=products.p21, p12m=products.p12m, p1m=products.p1m, p2m=products.p2m,
            M1=melnikov.M1, M2=melnikov.M2, S1=products.S1, S2=products.S2, U1=products.U1,
            U2=products.U2, L1=products.L1, L2=products.L2, rates=dict(products.rates),
            pairings=dict(products.pairings),
        )
        if case_tag is None:
            data.case_tag, data.gray_zone = classify_case(data.rates, equal_tol=equal_tol, gray=gray)
        else:
            data.case_tag = case_tag
        return data

    @classmethod
    def synthetic(cls, T, S1, S2, U1, U2, M1, M2, case_tag="general"):
        """Data whose boundary products are exactly their asymptotic surrogates."""
        return cls(T=T, p21=U1, p12m=U2, p1m=S1, p2m=S2, M1=M1, M2=M2, S1=S1, S2=S2, U1=U1, U2=U2,
                   case_tag=case_tag)

    def scaled_psi1(self, sigma: float) -> "ReducedEvansData":
        """Same data with psi1 multiplied by sigma (products with psi1 and M1 scale)."""
        from dataclasses import replace

        return replace(self, p12m=sigma * self.p12m, p1m=sigma * self.p1m, M1=sigma * self.M1)

    def denominator(self, asymptotic=True) -> float:
        if asymptotic:
            return (self.S2 - self.U1) * self.M1 + (self.S1 - self.U2) * self.M2
        return (self.p2m - self.p21) * self.M1 + (self.p1m - self.p12m) * self.M2

    def denominator_margin(self, asymptotic=True) -> float:
        if asymptotic:
            scale = abs(self.S2 * self.M1) + abs(self.U1 * self.M1) + abs(self.S1 * self.M2) + abs(self.U2 * self.M2)
        else:
            scale = (abs(self.p2m * self.M1) + abs(self.p21 * self.M1) + abs(self.p1m * self.M2)
                     + abs(self.p12m * self.M2))
        return abs(self.denominator(asymptotic)) / scale if scale > 0 else 0.0


def classify_case(rates: dict, *, equal_tol=0.05, gray=0.02) -> tuple[str, bool]:
    """Pick the closed form from the leading rates; flag the gray zone near the threshold."""
    a1s, a2s, a1u, a2u = rates["a1s"], rates["a2s"], rates["a1u"], rates["a2u"]
    if not (a1s < a1u and a2s < a2u):
        return "general", False
    rel = abs(a1s - a2s) / max(a1s, a2s)
    in_gray = abs(rel - equal_tol) <= gray
    return ("equal_leading_rates" if rel <= equal_tol else "dominated_rate"), in_gray


def evaluate_E(lam, xi, data: ReducedEvansData):
    """Leading-order reduced determinant with the exact boundary products."""
    ph = np.exp(1j * xi * data.T)
    return ((1.0 - ph) * data.p21 * data.p12m + (1.0 - np.conj(ph)) * data.p1m * data.p2m
            - (data.p2m - data.p21) * lam * data.M1 - (data.p1m - data.p12m) * lam * data.M2)


def evaluate_interaction(lam, xi, data: ReducedEvansData):
    """Two-interface determinant: E(lambda, xi) + lambda^2 M1 M2.

    Writing the eigenfunction as a1 h1' + a2 h2' near the front and the back
    gives the 2x2 system
        (lambda M1 - S1 + U2) a1 = (S1 e^{-i xi T} - U2) a2
        (lambda M2 - S2 + U1) a2 = (S2 - U1 e^{i xi T}) a1
    (boundary products in place of S_i, U_i).  Its determinant equals the
    reduced determinant above plus the lambda^2 M1 M2 term that the
    linear truncation drops; since lambda ~ S / M that term is of the same
    order as the ones retained.
    """
    return evaluate_E(lam, xi, data) + lam**2 * data.M1 * data.M2


def interaction_roots(xi, data: ReducedEvansData) -> np.ndarray:
    """Both roots of the two-interface determinant (exact products)."""
    P = data.M1 * data.M2
    D = data.denominator(asymptotic=False)
    C = evaluate_E(0.0, xi, data)
    r = np.sqrt(complex(D * D - 4.0 * P * C))
    return np.array([(D - r) / (2.0 * P), (D + r) / (2.0 * P)])


def interaction_critical(xi, data: ReducedEvansData, steps: int = 64) -> complex:
    """Root of the two-interface determinant continued from lambda = 0 at xi = 0."""
    prev = 0.0
    for s in np.linspace(0.0, float(xi), steps + 1):
        roots = interaction_roots(s, data)
        prev = roots[int(np.argmin(np.abs(roots - prev)))]
    return complex(prev)


def dE_dlambda(data: ReducedEvansData) -> float:
    return -data.denominator(asymptotic=False)


def closed_form(xi, data: ReducedEvansData, case: str | None = None):
    """lambda(xi) from the asymptotic coefficients, remainder dropped."""
    case = data.case_tag if case is None else case
    xi = np.asarray(xi, dtype=float)
    T = data.T
    em = 1.0 - np.exp(-1j * xi * T)
    if case == "general":
        ep = 1.0 - np.exp(1j * xi * T)
        return ep * (data.U1 * data.U2 - np.exp(-1j * xi * T) * data.S1 * data.S2) / data.denominator()
    if case == "equal_leading_rates":
        return em * data.S1 * data.S2 / (data.S2 * data.M1 + data.S1 * data.M2)
    if case == "dominated_rate":
        # the equilibrium with the larger stable rate sets the prefactor
        if data.rates.get("a1s", 0.0) <= data.rates.get("a2s", np.inf):
            return em * data.S2 / data.M2
        return em * data.S1 / data.M1
    raise ValueError(f"unknown case {case!r}")


def newton_root(xi, data: ReducedEvansData, seed, *, tol=1e-15, max_iter=20):
    """Newton on lambda -> E(lambda, xi) (complex-analytic, exact derivative)."""
    lam = complex(seed)
    dE = dE_dlambda(data)
    if dE == 0:
        raise DenominatorError("dE/dlambda vanishes")
    for _ in range(max_iter):
        step = evaluate_E(lam, xi, data) / dE
        lam -= step
        if abs(step) <= tol * max(1.0, abs(lam)):
            break
    return lam


@dataclass
class LambdaResult:
    xi: float
    closed_form: complex
    newton: complex
    case_tag: str
    alternates: dict = field(default_factory=dict)


def solve_lambda(xi, data: ReducedEvansData, *, min_margin=1e-8) -> LambdaResult:
    """Closed-form lambda(xi) for the data's case and the Newton-polished root of E."""
    if data.denominator_margin() < min_margin:
        raise DenominatorError(f"denominator margin {data.denominator_margin():.2e} below {min_margin:.0e}")
    lam_cf = complex(closed_form(xi, data))
    lam_nt = newton_root(xi, data, lam_cf)
    alternates = {}
    if data.gray_zone:
        warnings.warn("leading rates near the case threshold; emitting both closed forms", stacklevel=2)
        for case in ("equal_leading_rates", "dominated_rate"):
            alternates[case] = complex(closed_form(xi, data, case))
    return LambdaResult(xi=float(xi), closed_form=lam_cf, newton=lam_nt, case_tag=data.case_tag,
                        alternates=alternates)


@dataclass
class CriticalCurveAnalytic:
    T: float
    xi: np.ndarray
    closed_form: np.ndarray
    newton: np.ndarray
    b: float
    d: float
    case_tag: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["xi", "re_lambda", "im_lambda", "source"])
            for source, values in (("closed_form", self.closed_form), ("newton", self.newton)):
                for xi, lam in zip(self.xi, values):
                    writer.writerow([repr(float(xi)), repr(float(lam.real)), repr(float(lam.imag)), source])


def analytic_coefficients(data: ReducedEvansData) -> tuple[float, float]:
    """(b, d) of lambda = i b xi - d xi^2 + O(xi^3) from the general closed form."""
    D = data.denominator()
    T = data.T
    SS, UU = data.S1 * data.S2, data.U1 * data.U2
    return T * (SS - UU) / D, -T**2 * (UU + SS) / (2.0 * D)


def critical_curve(data: ReducedEvansData, count: int = 33) -> CriticalCurveAnalytic:
    from .bloch import xi_grid

    grid = xi_grid(data.T, count)
    cf = np.array([complex(closed_form(x, data)) for x in grid])
    nt = np.array([newton_root(x, data, c) for x, c in zip(grid, cf)])
    b, d = analytic_coefficients(data)
    return CriticalCurveAnalytic(T=data.T, xi=grid, closed_form=cf, newton=nt, b=b, d=d, case_tag=data.case_tag)


@dataclass
class TangencyFit:
    b: float
    d: float
    residual: float
    points: int


def fit_tangency(xi, lam, *, threshold=None) -> TangencyFit:
    """Least squares lambda ~ i b xi - d xi^2, with xi^3 / xi^4 nuisance terms.

    Odd powers fit Im lambda and even powers Re lambda (real-coefficient
    symmetry).  ``residual`` is the rms misfit relative to max |lambda|.
    """
    xi = np.asarray(xi, dtype=float)
    lam = np.asarray(lam, dtype=complex)
    if xi.size < 7:
        raise FitError("tangency fit needs at least 7 grid points")
    Ai = np.column_stack([xi, xi**3])
    Ar = np.column_stack([-(xi**2), xi**4])
    ci = np.linalg.lstsq(Ai, lam.imag, rcond=None)[0]
    cr = np.linalg.lstsq(Ar, lam.real, rcond=None)[0]
    model = 1j * (Ai @ ci) + Ar @ cr
    scale = max(np.max(np.abs(lam)), 1e-300)
    resid = float(np.sqrt(np.mean(np.abs(lam - model) ** 2)) / scale)
    if threshold is not None and resid > threshold:
        raise FitError(f"tangency fit residual {resid:.2e} above {threshold:.0e}")
    return TangencyFit(b=float(ci[0]), d=float(cr[0]), residual=resid, points=int(xi.size))


def tangency_coefficients(curve: CriticalCurveAnalytic, *, fraction=0.25, threshold=1e-2) -> TangencyFit:
    small = np.abs(curve.xi) <= fraction * np.pi / curve.T + 1e-15
    return fit_tangency(curve.xi[small], curve.closed_form[small], threshold=threshold)
