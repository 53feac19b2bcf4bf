"""Bounded adjoint solutions along the heteroclinics, Melnikov integrals and
the boundary inner products that enter the reduced determinant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .collocation import Condition, _assemble, collocation_residual, mesh_error
from .model import CouplingMatrixB, ModelParams, coupling_matrix, find_equilibria, tw_jacobian, tw_param_jacobian
from .orbits import OrbitProfile, smallest_singular_values

logger = logging.getLogger(__name__)

# 3-point Gauss-Legendre nodes/weights on [0, 1]
_GL_T = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GL_W = np.array([5.0, 8.0, 5.0]) / 18.0


class KernelDimensionError(RuntimeError):
    """The adjoint problem does not have a one-dimensional numerical kernel."""


class UnreliableIntegralError(RuntimeError):
    """Quadrature error estimate too large relative to the integral."""


def _endpoint_equilibria(h: OrbitProfile, params: ModelParams):
    eqs = find_equilibria(params)
    e1, e2 = eqs[0], eqs[-1]
    return (e1, e2) if h.kind == "front" else (e2, e1)


def linear_bvp_matrix(h: OrbitProfile, coeff_map, left_rows: np.ndarray, right_rows: np.ndarray,
                      scale_rows=True):
    """Collocation matrix of y' = coeff_map(A(h(x))) y with rows
    ``left_rows @ y(x_0) = 0`` and ``right_rows @ y(x_N) = 0``.

    Collocation rows are divided by the interval length when ``scale_rows``
    so that singular values refer to the differential operator.
    """
    params = h.params
    x = h.mesh

    def fun(xq, y, p):
        M = coeff_map(tw_jacobian(h(xq), params))
        return np.einsum("abm,bm->am", M, y)

    def jac(xq, y, p):
        M = coeff_map(tw_jacobian(h(xq), params))
        return M, np.zeros((3, 0, xq.size))

    def rows_condition(node, rows):
        rows = np.atleast_2d(rows)

        def func(Ysel, p):
            dY = rows[:, :, None]
            return rows @ Ysel[:, 0], dY, np.zeros((rows.shape[0], 0))

        return Condition([node], func)

    conds = [rows_condition(0, left_rows), rows_condition(x.size - 1, right_rows)]
    y0 = np.zeros((3, x.size))
    _, A, _, _ = _assemble(fun, jac, x, y0, np.zeros(0), conds)
    if scale_rows:
        h_int = np.diff(x)
        scale = np.concatenate([np.repeat(1.0 / h_int, 3), np.ones(A.shape[0] - 3 * h_int.size)])
        A = sp.diags(scale) @ A
    return A.tocsc(), fun


def _adjoint_map(J):
    return -np.swapaxes(J, 0, 1)


@dataclass
class AdjointProfile:
    profile: OrbitProfile
    parent: int
    kernel_sigmas: np.ndarray
    residual: float  # collocation defect, as for the orbit profiles
    orthogonality: float
    mesh_residual: float = 0.0  # continuous residual between collocation points

    def __call__(self, xq):
        return self.profile(xq)

    @property
    def mesh(self):
        return self.profile.mesh


def compute_adjoint(h: OrbitProfile, partner: OrbitProfile | None = None, *, kernel_ratio=100.0,
                    seed=0) -> AdjointProfile:
    """Bounded solution of psi' = -A(h(x))^T psi, normalised to |psi(0)| = 1.

    Decay at the left end confines psi to the left eigenvectors for the
    stable eigenvalues of the source equilibrium (orthogonal to the right
    unstable ones); at the right end to the left unstable eigenvectors of
    the target.  The square but singular collocation system is bordered
    to extract its kernel.  With ``partner`` (the other heteroclinic of the
    loop) the sign is chosen so that the leading stable limit vectors pair
    positively; otherwise the first nonzero component of psi(0) is positive.
    """
    params = h.params
    src, dst = _endpoint_equilibria(h, params)
    left_rows = src.real_basis("unstable", "right").T
    right_rows = dst.real_basis("stable", "right").T
    A, fun = linear_bvp_matrix(h, _adjoint_map, left_rows, right_rows)
    sig = smallest_singular_values(A, 2)
    if not sig[1] >= kernel_ratio * sig[0]:
        raise KernelDimensionError(
            f"adjoint kernel not one-dimensional: smallest singular values {sig[0]:.3e}, {sig[1]:.3e}"
        )
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    i0 = h.node_index(0.0)
    # border column localised on the collocation rows next to x = 0, so the
    # O(sigma_1) defect of the bordered solution decays like psi itself
    b = np.zeros(n)
    b[3 * i0 : 3 * i0 + 3] = rng.standard_normal(3)
    b /= np.linalg.norm(b)
    cvec = np.zeros(n)
    cvec[3 * i0 : 3 * i0 + 3] = rng.standard_normal(3)
    bordered = sp.bmat([[A, sp.csc_matrix(b[:, None])], [sp.csc_matrix(cvec[None, :]), None]]).tocsc()
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    z = spla.spsolve(bordered, rhs)
    Y = z[:n].reshape(-1, 3).T
    Y /= np.linalg.norm(Y[:, i0])
    Y *= _orientation_sign(Y, h, partner, params)
    f = fun(h.mesh, Y, None)
    prof = OrbitProfile(mesh=h.mesh.copy(), y=Y, kind="adjoint", params=params, slopes=f,
                        meta={"parent": h.kind})
    defect = collocation_residual(fun, h.mesh, Y, None)[0]
    res = float(np.max(np.abs(defect / np.diff(h.mesh))))
    between = float(np.max(mesh_error(fun, h.mesh, Y, f, None)))
    hp = h.derivative(h.mesh)
    orth = float(np.max(np.abs(np.sum(Y * hp, axis=0))))
    parent = 1 if h.kind == "front" else 2
    prof.bvp_residual = res
    prof.mesh_residual = between
    return AdjointProfile(profile=prof, parent=parent, kernel_sigmas=sig, residual=res, orthogonality=orth,
                          mesh_residual=between)


def _orientation_sign(Y, h, partner, params) -> float:
    if partner is None:
        i0 = h.node_index(0.0)
        for comp in Y[:, i0]:
            if abs(comp) > 1e-12:
                return float(np.sign(comp))
        return 1.0
    # leading stable direction of the source equilibrium of h
    src, _ = _endpoint_equilibria(h, params)
    lead = int(src.stable_indices[int(np.argmax([src.jacobian_eigs[i].real for i in src.stable_indices]))])
    r_s = src.right_vecs[:, lead].real
    l_s = src.left_vecs[:, lead].real
    # psi near the left end, partner's tangent near its right end (both approach src)
    xl = h.mesh[0] * 0.5
    xr = partner.mesh[-1] * 0.5
    kappa = float(np.array([np.interp(xl, h.mesh, Y[j]) for j in range(3)]) @ r_s)
    mu = float(l_s @ partner.derivative(xr)[:, 0])
    return 1.0 if kappa * mu * float(l_s @ r_s) > 0 else -1.0


# ------------------------------------------------------------ quadrature
def _gauss_points(x: np.ndarray, per_interval: int = 3):
    if per_interval == 3:
        t, w = _GL_T, _GL_W
    else:
        gt, gw = np.polynomial.legendre.leggauss(per_interval)
        t, w = 0.5 * (gt + 1.0), 0.5 * gw
    h = np.diff(x)
    xq = (x[:-1, None] + h[:, None] * t[None, :]).ravel()
    wq = (h[:, None] * w[None, :]).ravel()
    return xq, wq


@dataclass
class MelnikovData:
    M1: float
    M2: float
    N1: np.ndarray
    N2: np.ndarray
    quadrature_error_estimates: dict = field(default_factory=dict)

    @property
    def det_N(self) -> float:
        return float(self.N1[0] * self.N2[1] - self.N1[1] * self.N2[0])


@dataclass
class Integral:
    value: float
    error: float
    tail: float
    refined: float


def _integrate(x, integrand_fn, tail_rate_hint=None) -> Integral:
    """Gauss-Legendre on every mesh interval plus an error estimate.

    The error estimate combines the change under doubling of quadrature
    nodes and an exponential tail bound from the end values of the
    integrand and its measured decay rate.
    """
    xq, wq = _gauss_points(x, 3)
    val = float(np.sum(wq * integrand_fn(xq)))
    xq2, wq2 = _gauss_points(x, 6)
    val2 = float(np.sum(wq2 * integrand_fn(xq2)))
    tail = 0.0
    for end, sgn in ((x[0], 1), (x[-1], -1)):
        span = 0.1 * (x[-1] - x[0])
        g0 = abs(float(integrand_fn(np.array([end]))[0]))
        g1 = abs(float(integrand_fn(np.array([end + sgn * span]))[0]))
        rate = np.log(g1 / g0) / span if g0 > 0 and g1 > g0 else (tail_rate_hint or 0.0)
        tail += g0 / rate if rate > 0 else g0 * span
    return Integral(value=val, error=abs(val2 - val) + tail, tail=tail, refined=val2)


def melnikov_lambda(psi: AdjointProfile, h: OrbitProfile, B: CouplingMatrixB | None = None,
                    *, via_field=False, relative_limit=0.1) -> Integral:
    """M = integral of <psi, B h'> with h' the derivative of the collocation cubic.

    ``via_field`` evaluates h' as the vector field at h instead; the two
    quadrature paths differ only by the collocation interpolation error.
    """
    B = coupling_matrix(h.params) if B is None else B
    Bm = B.matrix

    def integrand(xq):
        hp = h.derivative(xq, via_field=via_field)
        return np.einsum("am,am->m", psi(xq), Bm @ hp)

    out = _integrate(h.mesh, integrand)
    out.error += abs(_integrate(h.mesh, lambda xq: integrand_diff(xq, psi, h, Bm)).value)
    if out.error > relative_limit * abs(out.value):
        raise UnreliableIntegralError(f"Melnikov error estimate {out.error:.2e} vs value {out.value:.3e}")
    return out


def integrand_diff(xq, psi, h, Bm):
    a = h.derivative(xq, via_field=False)
    b = h.derivative(xq, via_field=True)
    return np.einsum("am,am->m", psi(xq), Bm @ (a - b))


def melnikov_params(psi: AdjointProfile, h: OrbitProfile, params: ModelParams | None = None):
    """(N_gamma, N_c): integrals of <psi, d/dmu F(h)> for mu = (gamma, c)."""
    params = h.params if params is None else params
    vals, errs = [], []
    for j in range(2):
        def integrand(xq, j=j):
            return np.einsum("am,am->m", psi(xq), tw_param_jacobian(h(xq), params)[:, j, :])

        res = _integrate(h.mesh, integrand)
        vals.append(res.value)
        errs.append(res.error)
    return np.array(vals), np.array(errs)


def melnikov_data(psi1, psi2, h1, h2) -> MelnikovData:
    m1, m2 = melnikov_lambda(psi1, h1), melnikov_lambda(psi2, h2)
    n1, e1 = melnikov_params(psi1, h1)
    n2, e2 = melnikov_params(psi2, h2)
    return MelnikovData(
        M1=m1.value, M2=m2.value, N1=n1, N2=n2,
        quadrature_error_estimates={"M1": m1.error, "M2": m2.error, "N1": e1.tolist(), "N2": e2.tolist()},
    )


# ------------------------------------------------------------ limit vectors
def _second_rate(eq, which):
    """Decay rate of the next eigenvalue after the leading one (for extrapolation)."""
    if which == "stable":
        rates = sorted(-eq.jacobian_eigs[i].real for i in eq.stable_indices)
    else:
        rates = sorted(eq.jacobian_eigs[i].real for i in eq.unstable_indices)
    return rates[1] - rates[0] if len(rates) > 1 else None


def limit_vector(sample, rate: float, end: str, interval, gap=None, window=(1e-4, 1e-10),
                 fraction=0.1):
    """Renormalised endpoint limit of exp(+-rate x) * sample(x).

    The tail behaves like v + C exp(-g |x|) where g is the smaller of the
    spectral gap and the rate itself (quadratic terms of the vector field).
    Two points are taken where |sample| has dropped into ``window``
    (relative to its maximum), but not inside the last ``fraction`` of the
    half-interval where truncation acts; the pair eliminates the leading
    correction.  A log-slope fit of |sample| between them is returned for
    checking the rate.
    """
    x0, x1 = interval
    gap = rate if gap is None else min(gap, rate)
    edge = x1 * (1.0 - fraction) if end == "right" else x0 * (1.0 - fraction)
    xs = np.linspace(0.0, edge, 2001)
    mag = np.linalg.norm(sample(xs), axis=0)
    rel = mag / mag.max()
    inner = xs[np.argmax(rel < window[0])] if np.any(rel < window[0]) else 0.5 * edge
    outer_ok = rel > window[1]
    outer = xs[np.flatnonzero(outer_ok)[-1]] if np.any(outer_ok) else edge
    if abs(outer) <= abs(inner):
        inner = 0.5 * outer
    xa, xb = inner, outer
    sgn = 1.0 if end == "right" else -1.0
    pts = np.array([xa, xb])
    vals = sample(pts)
    scaled = vals * np.exp(sgn * rate * pts)[None, :]
    if gap is not None and gap > 0:
        q = np.exp(-gap * abs(xb - xa))
        limit = (scaled[:, 1] - q * scaled[:, 0]) / (1.0 - q)
    else:
        limit = scaled[:, 1]
    xs = np.linspace(xa, xb, 21)
    slope = np.polyfit(xs, np.log(np.linalg.norm(sample(xs), axis=0)), 1)[0]
    return limit, float(abs(slope))


@dataclass
class BoundaryProducts:
    """Exact boundary inner products and their asymptotic surrogates."""

    L1: float
    L2: float
    p21: float  # <psi2(L2), h1'(-L1)>
    p12m: float  # <psi1(L1), h2'(-L2)>
    p1m: float  # <psi1(-L1), h2'(L2)>
    p2m: float  # <psi2(-L2), h1'(L1)>
    S1: float
    S2: float
    U1: float
    U2: float
    rates: dict
    limit_vectors: dict
    pairings: dict
    measured_rates: dict

    @property
    def T(self) -> float:
        return 2.0 * (self.L1 + self.L2)


def boundary_products(psi1: AdjointProfile, psi2: AdjointProfile, h1: OrbitProfile, h2: OrbitProfile,
                      L1: float, L2: float) -> BoundaryProducts:
    for prof, L in ((h1, L1), (h2, L2), (psi1.profile, L1), (psi2.profile, L2)):
        if L > prof.mesh[-1] or -L < prof.mesh[0]:
            raise ValueError(f"requested L={L} beyond the profile interval {prof.interval}")

    def dot(a, b):
        return float(a[:, 0] @ b[:, 0])

    p21 = dot(psi2(L2), h1.derivative(-L1))
    p12m = dot(psi1(L1), h2.derivative(-L2))
    p1m = dot(psi1(-L1), h2.derivative(L2))
    p2m = dot(psi2(-L2), h1.derivative(L1))

    eqs = find_equilibria(h1.params)
    e1, e2 = eqs[0], eqs[-1]
    r = {"a1s": e1.alpha_s, "a1u": e1.alpha_u, "a2s": e2.alpha_s, "a2u": e2.alpha_u}
    g = {k: _second_rate(e, w) for k, e, w in (("1s", e1, "stable"), ("1u", e1, "unstable"),
                                               ("2s", e2, "stable"), ("2u", e2, "unstable"))}
    iv = h1.interval
    v1p, m_v1p = limit_vector(h2.derivative, r["a1s"], "right", h2.interval, g["1s"])
    v2p, m_v2p = limit_vector(h1.derivative, r["a2s"], "right", iv, g["2s"])
    v1m, m_v1m = limit_vector(h1.derivative, r["a1u"], "left", iv, g["1u"])
    v2m, m_v2m = limit_vector(h2.derivative, r["a2u"], "left", h2.interval, g["2u"])
    w1p, m_w1p = limit_vector(psi1, r["a1s"], "left", psi1.profile.interval, g["1s"])
    w2p, m_w2p = limit_vector(psi2, r["a2s"], "left", psi2.profile.interval, g["2s"])
    w2m, m_w2m = limit_vector(psi1, r["a2u"], "right", psi1.profile.interval, g["2u"])
    w1m, m_w1m = limit_vector(psi2, r["a1u"], "right", psi2.profile.interval, g["1u"])
    pair = {
        "w1p_v1p": float(w1p @ v1p), "w2p_v2p": float(w2p @ v2p),
        "w1m_v1m": float(w1m @ v1m), "w2m_v2m": float(w2m @ v2m),
    }
    s = L1 + L2
    return BoundaryProducts(
        L1=L1, L2=L2, p21=p21, p12m=p12m, p1m=p1m, p2m=p2m,
        S1=np.exp(-r["a1s"] * s) * pair["w1p_v1p"], S2=np.exp(-r["a2s"] * s) * pair["w2p_v2p"],
        U1=np.exp(-r["a1u"] * s) * pair["w1m_v1m"], U2=np.exp(-r["a2u"] * s) * pair["w2m_v2m"],
        rates=r,
        limit_vectors={"v1p": v1p, "v2p": v2p, "v1m": v1m, "v2m": v2m,
                       "w1p": w1p, "w2p": w2p, "w1m": w1m, "w2m": w2m},
        pairings=pair,
        measured_rates={"v1p": m_v1p, "v2p": m_v2p, "v1m": m_v1m, "v2m": m_v2m,
                        "w1p": m_w1p, "w2p": m_w2p, "w1m": m_w1m, "w2m": m_w2m},
    )
