"""Heteroclinic front/back, the loop locus, and the bifurcating periodic orbits.

All profiles are computed by collocation (see :mod:`fhnloop.collocation`) on
truncated intervals.  Heteroclinic ends use projection conditions written
with left eigenvectors of the equilibrium Jacobians: the departure end must
have no component along the stable directions of the source equilibrium,
the arrival end none along the unstable directions of the target.
"""

from __future__ import annotations

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .collocation import Condition, ConvergenceError, hermite_eval, solve_bvp_adaptive
from .model import (
    EPSILON_STAR,
    Equilibrium,
    ModelParams,
    find_equilibria,
    symmetric_gamma,
    symmetry_map,
    tw_jacobian,
    tw_param_jacobian,
    tw_vector_field,
)

logger = logging.getLogger(__name__)

KINDS = ("front", "back", "periodic", "adjoint")
FORMAT_TAG = "fhnloop-orbit v1"


class TruncationError(ValueError):
    """Truncation interval too short for the equilibrium decay rates."""


@dataclass
class OrbitProfile:
    """Collocation solution on a mesh.

    ``y`` and ``slopes`` have shape (3, N + 1); the profile between nodes is
    the C1 cubic determined by values and slopes.
    """

    mesh: np.ndarray
    y: np.ndarray
    kind: str
    params: ModelParams
    slopes: np.ndarray | None = None
    bvp_residual: float = 0.0
    mesh_residual: float = 0.0
    tol: float = 1e-10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mesh = np.asarray(self.mesh, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.kind not in KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.y.shape != (3, self.mesh.size):
            raise ValueError(f"values must have shape (3, {self.mesh.size}), got {self.y.shape}")
        if np.any(np.diff(self.mesh) <= 0):
            raise ValueError("mesh must be strictly increasing")
        if self.slopes is None:
            if self.kind == "adjoint":
                raise ValueError("adjoint profiles need explicit slopes")
            self.slopes = tw_vector_field(self.y, self.params)

    @property
    def values(self) -> np.ndarray:
        return self.y.T

    @property
    def interval(self) -> tuple[float, float]:
        return float(self.mesh[0]), float(self.mesh[-1])

    def __call__(self, xq):
        return hermite_eval(self.mesh, self.y, self.slopes, xq)

    def derivative(self, xq, via_field=True):
        """Tangent at ``xq``: the vector field at the interpolant, or the
        derivative of the interpolating cubic when ``via_field`` is false."""
        if via_field and self.kind != "adjoint":
            return tw_vector_field(self(xq), self.params)
        return hermite_eval(self.mesh, self.y, self.slopes, xq, derivative=True)

    def node_index(self, x0) -> int:
        i = int(np.argmin(np.abs(self.mesh - x0)))
        if abs(self.mesh[i] - x0) > 1e-9 * (1 + abs(x0)):
            raise KeyError(f"{x0} is not a mesh node")
        return i

    # ---------------------------------------------------------------- I/O
    def to_text(self) -> str:
        p = self.params
        lines = [
            f"# {FORMAT_TAG}",
            f"# kind: {self.kind}",
            f"# a: {p.a!r}",
            f"# gamma: {p.gamma!r}",
            f"# epsilon: {p.epsilon!r}",
            f"# c: {p.c!r}",
            f"# N: {self.mesh.size - 1}",
            f"# tol: {self.tol!r}",
            f"# bvp_residual: {self.bvp_residual!r}",
            f"# mesh_residual: {self.mesh_residual!r}",
        ]
        for key, val in sorted(self.meta.items()):
            lines.append(f"# meta.{key}: {val!r}")
        cols = ["x", "u", "v", "w"]
        data = [self.mesh[:, None], self.y.T]
        if self.kind == "adjoint":
            cols += ["du", "dv", "dw"]
            data.append(self.slopes.T)
        lines.append("# columns: " + " ".join(cols))
        body = np.hstack(data)
        lines.extend(" ".join(repr(float(v)) for v in row) for row in body)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "OrbitProfile":
        header = {}
        rows = []
        for line in io.StringIO(text):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                header[key.strip()] = val.strip()
            else:
                rows.append([float(tok) for tok in line.split()])
        if header.get(FORMAT_TAG.split()[0]) is None and FORMAT_TAG not in text.splitlines()[0]:
            raise ValueError("not an orbit profile checkpoint")
        params = ModelParams(
            a=float(header["a"]), gamma=float(header["gamma"]),
            epsilon=float(header["epsilon"]), c=float(header["c"]),
        )
        data = np.array(rows, dtype=float)
        n_expected = int(header["N"]) + 1
        if data.shape[0] != n_expected:
            raise ValueError(f"expected {n_expected} rows, found {data.shape[0]}")
        kind = header["kind"]
        slopes = data[:, 4:7].T.copy() if kind == "adjoint" else None
        meta = {}
        for key, val in header.items():
            if key.startswith("meta."):
                meta[key[5:]] = _parse_literal(val)
        return cls(
            mesh=data[:, 0].copy(), y=data[:, 1:4].T.copy(), kind=kind, params=params,
            slopes=slopes, bvp_residual=float(header.get("bvp_residual", 0.0)),
            mesh_residual=float(header.get("mesh_residual", 0.0)),
            tol=float(header.get("tol", 1e-10)), meta=meta,
        )

    @classmethod
    def load(cls, path) -> "OrbitProfile":
        with open(path, encoding="ascii") as fh:
            return cls.from_text(fh.read())


def _parse_literal(text):
    import ast

    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


# ------------------------------------------------------------------ helpers
def _tw_fun(params_of):
    def fun(x, y, p):
        return tw_vector_field(y, params_of(p))

    return fun


def _tw_jac(params_of, free):
    """Jacobian callback; ``free`` lists which of ('gamma', 'c') are unknowns."""
    cols = [("gamma", "c").index(name) for name in free]

    def jac(x, y, p):
        prm = params_of(p)
        J = tw_jacobian(y, prm)
        P = tw_param_jacobian(y, prm)[:, cols, :]
        return J, P

    return jac


def _stack_fun(fun, jac, m):
    """Vector field for ``m`` copies of the 3D system sharing parameters."""

    def sfun(x, y, p):
        return np.concatenate([fun(x, y[3 * j : 3 * j + 3], p) for j in range(m)])

    def sjac(x, y, p):
        n = 3 * m
        J = np.zeros((n, n, x.size))
        Ps = []
        for j in range(m):
            Jj, Pj = jac(x, y[3 * j : 3 * j + 3], p)
            J[3 * j : 3 * j + 3, 3 * j : 3 * j + 3] = Jj
            Ps.append(Pj)
        return J, np.concatenate(Ps, axis=0)

    return sfun, sjac


def _equilibrium_pair(params: ModelParams) -> tuple[Equilibrium, Equilibrium]:
    eqs = find_equilibria(params)
    if len(eqs) != 3:
        raise ValueError(f"loop needs three equilibria, found {len(eqs)} for {params}")
    e1, e2 = eqs[0], eqs[2]
    e1.require_hyperbolic()
    e2.require_hyperbolic()
    return e1, e2


def _projection_rows(params: ModelParams, which_eq: int, which: str):
    """Rows L and point e so that the condition reads L (y - e) = 0.

    ``which`` names the subspace to be annihilated (its left eigenvectors
    form the rows), e.g. 'stable' at a departure end.
    """
    e = _equilibrium_pair(params)[which_eq]
    return e.real_basis(which, side="left").T, e.point


def _projection_condition(node, slot, params_of, p_ref, which_eq, which, fd_h=1e-7):
    """Projection boundary condition with parameter sensitivity by differences."""

    def rows_point(p):
        return _projection_rows(params_of(p), which_eq, which)

    L0, e0 = rows_point(p_ref)

    def func(Ysel, p):
        L, e = rows_point(p)
        if L.shape != L0.shape:
            raise ValueError("eigenspace dimension changed along the Newton path")
        # keep the row orientation/scale continuous with the reference rows
        L = _align_rows(L, L0)
        yv = Ysel[slot, 0]
        r = L @ (yv - e)
        dY = np.zeros((L.shape[0], Ysel.shape[0], 1))
        dY[:, slot, 0] = L
        dp = np.zeros((L.shape[0], p.size))
        for j in range(p.size):
            pj = p.copy()
            step = fd_h * (1 + abs(pj[j]))
            pj[j] += step
            Lj, ej = rows_point(pj)
            if Lj.shape != L0.shape:
                raise ValueError("eigenspace dimension changed under parameter perturbation")
            Lj = _align_rows(Lj, L0)
            dp[:, j] = (Lj @ (yv - ej) - r) / step
        return r, dY, dp

    return Condition(nodes=[node], func=func, name=f"projection-{which}-e{which_eq + 1}")


def _align_rows(L, Lref):
    """Fix the basis of a row space against a reference (sign/mixing drift)."""
    if L.shape[0] == 1:
        return L if float(L[0] @ Lref[0]) >= 0 else -L
    # express in the reference basis: L_aligned spans the same space as L
    # and is closest to Lref
    Q = np.linalg.lstsq(L.T, Lref.T, rcond=None)[0]
    return (L.T @ Q).T


def _phase_condition(node, slot, m, r):
    def func(Ysel, p):
        yv = Ysel[slot, 0]
        res = np.array([float(r @ (yv - m))])
        dY = np.zeros((1, Ysel.shape[0], 1))
        dY[0, slot, 0] = r
        return res, dY, np.zeros((1, p.size))

    return Condition(nodes=[node], func=func, name="phase")


def default_mesh(half_length: float, h_core=0.1, h_max=0.5, core=8.0) -> np.ndarray:
    """Symmetric mesh on [-half_length, half_length] with node 0, graded from a fine core."""
    right = [0.0]
    while right[-1] < half_length:
        xr = right[-1]
        h = h_core if xr < core else min(h_max, h_core * (1 + (xr - core) / 4.0))
        right.append(min(xr + h, half_length))
    right = np.array(right)
    return np.concatenate([-right[:0:-1], right])


def planar_front_speed(a: float) -> float:
    """Speed of the bistable front 0 -> 1 of u'' - c u' + f(u) = 0."""
    return (1.0 - 2.0 * a) / np.sqrt(2.0)


def _right_branch_u(w, a):
    """Largest real root of f(u) = w (right branch of the cubic)."""
    w = np.atleast_1d(w)
    out = np.empty_like(w, dtype=float)
    for i, wi in enumerate(w):
        roots = np.roots([-1.0, 1.0 + a, -a, -wi])
        out[i] = max(r.real for r in roots if abs(r.imag) < 1e-9)
    return out


def singular_front_guess(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Initial guess from the slow-fast skeleton of the front e1 -> e2.

    A logistic fast jump onto the right branch at w = 0 followed by slow
    relaxation of w towards e2 along the right branch.
    """
    _, e2 = _equilibrium_pair(params)
    w2 = e2.point[2]
    rate = e2.alpha_s
    xp = np.maximum(x, 0.0)
    w = w2 * (1.0 - np.exp(-rate * xp)) * (0.5 * (1.0 + np.tanh(x)))
    k = 1.0 / np.sqrt(2.0)
    u = _right_branch_u(w, params.a) / (1.0 + np.exp(-k * x))
    v = np.gradient(u, x)
    return np.vstack([u, v, w])


# ------------------------------------------------------------ heteroclinics
def _check_truncation(params: ModelParams, half_length: float, level=0.01):
    e1, e2 = _equilibrium_pair(params)
    alpha = min(e1.alpha_s, e1.alpha_u, e2.alpha_s, e2.alpha_u)
    if np.exp(-alpha * half_length) > level:
        raise TruncationError(
            f"half-length {half_length} too short: exp(-alpha*l) = "
            f"{np.exp(-alpha * half_length):.3g} > {level} (alpha = {alpha:.4g})"
        )
    return alpha


def _connection(params, direction, x, guess, free, tol, mesh_tol, max_iter=40):
    """Solve one heteroclinic (direction 'front': e1 -> e2, 'back': e2 -> e1)."""
    src, dst = (0, 1) if direction == "front" else (1, 0)
    e_src, e_dst = _equilibrium_pair(params)[src], _equilibrium_pair(params)[dst]
    m = 0.5 * (e_src.point + e_dst.point)
    r = (e_dst.point - e_src.point) / np.linalg.norm(e_dst.point - e_src.point)
    base = params

    def params_of(p):
        kw = dict(zip(free, p))
        return base.replace(**kw)

    p0 = np.array([getattr(base, name) for name in free], dtype=float)
    fun, jac = _tw_fun(params_of), _tw_jac(params_of, free)

    def make_conditions(xm):
        i0 = int(np.argmin(np.abs(xm)))
        return [
            _projection_condition(0, slice(0, 3), params_of, p0, src, "stable"),
            _projection_condition(xm.size - 1, slice(0, 3), params_of, p0, dst, "unstable"),
            _phase_condition(i0, slice(0, 3), m, r),
        ]

    sol = solve_bvp_adaptive(
        fun, jac, x, guess, p0, make_conditions, newton_tol=tol, mesh_tol=mesh_tol, max_iter=max_iter
    )
    return sol, params_of(sol.p)


def compute_front(params: ModelParams, initial_guess=None, *, half_length=None,
                  free=("c",), tol=1e-11, mesh_tol=1e-9) -> OrbitProfile:
    """Front h1 from e1 to e2; the parameters listed in ``free`` are solved for.

    With one free parameter (the speed by default) the problem is square:
    two departure conditions, one arrival condition and the phase condition
    for three states plus one unknown parameter.
    """
    return _compute_connection(params, "front", initial_guess, half_length, free, tol, mesh_tol)


def compute_back(params: ModelParams, initial_guess=None, *, half_length=None,
                 free=("c",), tol=1e-11, mesh_tol=1e-9) -> OrbitProfile:
    """Back h2 from e2 to e1 (roles of the equilibria swapped)."""
    return _compute_connection(params, "back", initial_guess, half_length, free, tol, mesh_tol)


def _compute_connection(params, direction, initial_guess, half_length, free, tol, mesh_tol):
    if isinstance(initial_guess, OrbitProfile):
        x = initial_guess.mesh
        guess = initial_guess.y
        half_length = half_length or float(x[-1])
    else:
        if half_length is None:
            e1, e2 = _equilibrium_pair(params)
            alpha = min(e1.alpha_s, e2.alpha_s)
            half_length = max(40.0, np.log(1e8) / alpha)
        x = default_mesh(half_length)
        guess = singular_front_guess(params, x)
        if direction == "back":  # reflected front
            guess = symmetry_map(guess, params.replace(gamma=symmetric_gamma(params.a)))
            guess[1] = np.gradient(guess[0], x)
    _check_truncation(params, half_length)
    sol, prm = _connection(params, direction, x, guess, tuple(free), tol, mesh_tol)
    return OrbitProfile(
        mesh=sol.x, y=sol.y, kind=direction, params=prm, slopes=sol.f,
        bvp_residual=sol.defect, mesh_residual=sol.mesh_error, tol=tol,
        meta={"condition_residual": sol.condition_residual},
    )


def decay_rate_fit(profile: OrbitProfile, end: str, target=None, lo=1e-12, hi=1e-3):
    """Log-slope of |y - target| over the tail where it lies in [lo, hi]."""
    if target is None:
        target = profile.y[:, 0] if end == "left" else profile.y[:, -1]
    dist = np.linalg.norm(profile.y - np.asarray(target)[:, None], axis=0)
    mask = (dist > lo) & (dist < hi)
    if end == "left":
        mask &= profile.mesh < 0
    else:
        mask &= profile.mesh > 0
    if mask.sum() < 5:
        raise ValueError("not enough tail points for a decay fit")
    slope = np.polyfit(profile.mesh[mask], np.log(dist[mask]), 1)[0]
    return float(abs(slope))


# -------------------------------------------------------------------- loop
@dataclass
class LoopLocus:
    epsilon: float
    gamma0: float
    c_star: float
    h1: OrbitProfile
    h2: OrbitProfile
    splitting_residuals: np.ndarray
    params: ModelParams
    e1: Equilibrium
    e2: Equilibrium

    @property
    def alpha(self) -> float:
        return float(min(self.e1.alpha_s, self.e1.alpha_u, self.e2.alpha_s, self.e2.alpha_u))

    @classmethod
    def from_profiles(cls, h1: OrbitProfile, h2: OrbitProfile) -> "LoopLocus":
        """Rebuild the locus from saved front and back profiles."""
        prm = h1.params
        e1, e2 = _equilibrium_pair(prm)
        return cls(epsilon=prm.epsilon, gamma0=prm.gamma, c_star=prm.c, h1=h1, h2=h2,
                   splitting_residuals=splitting(h1, h2, prm), params=prm, e1=e1, e2=e2)


def splitting(h1: OrbitProfile, h2: OrbitProfile, params: ModelParams) -> np.ndarray:
    """Arrival-end components along the unstable left eigenvectors of the targets."""
    e1, e2 = _equilibrium_pair(params)
    l2 = e2.real_basis("unstable", "left")[:, 0]
    l1 = e1.real_basis("unstable", "left")[:, 0]
    return np.array([l2 @ (h1.y[:, -1] - e2.point), l1 @ (h2.y[:, -1] - e1.point)])


def locate_loop(epsilon: float, a: float, *, half_length=None, gamma_guess=None, c_guess=None,
                tol=1e-11, mesh_tol=1e-9, epsilon_star=EPSILON_STAR,
                initial: "LoopLocus | None" = None) -> LoopLocus:
    """Solve for (gamma, c) at which front and back exist simultaneously.

    Front and back are solved as one six-dimensional collocation problem on
    a common mesh with (gamma, c) as shared unknowns, started from a front
    solve (speed only) and its image under the point reflection.  A nearby
    ``initial`` locus (another epsilon) may be supplied as the starting guess.
    """
    if epsilon > epsilon_star:
        raise ValueError(f"epsilon={epsilon} exceeds the slow-fast ceiling {epsilon_star}")
    g0 = symmetric_gamma(a) if gamma_guess is None else gamma_guess
    c0 = planar_front_speed(a) if c_guess is None else c_guess
    if initial is not None:
        g0 = initial.gamma0 if gamma_guess is None else gamma_guess
        c0 = initial.c_star if c_guess is None else c_guess
    params = ModelParams(a=a, gamma=g0, epsilon=epsilon, c=c0)
    guess = None
    if initial is not None:
        guess = initial.h1
        if half_length is None:
            # slower tails at the new epsilon may need a longer interval than the seed's
            e1, e2 = _equilibrium_pair(params)
            needed = max(40.0, np.log(1e8) / min(e1.alpha_s, e2.alpha_s))
            if needed > initial.h1.mesh[-1]:
                half_length = needed
        if half_length is not None:
            x = default_mesh(half_length)
            guess = OrbitProfile(mesh=x, y=initial.h1(np.clip(x, *initial.h1.interval)),
                                 kind="front", params=initial.params)
    front = compute_front(params, guess, half_length=half_length, tol=tol, mesh_tol=mesh_tol)
    half_length = float(front.mesh[-1])
    params = front.params
    back_guess = symmetry_map(front.y, params.replace(gamma=symmetric_gamma(a)))
    x = front.mesh

    free = ("gamma", "c")
    base = params

    def params_of(p):
        return base.replace(gamma=float(p[0]), c=float(p[1]))

    p0 = np.array([params.gamma, params.c])
    e1, e2 = _equilibrium_pair(params)
    m = 0.5 * (e1.point + e2.point)
    r = (e2.point - e1.point) / np.linalg.norm(e2.point - e1.point)
    fun, jac = _stack_fun(_tw_fun(params_of), _tw_jac(params_of, free), 2)

    def make_conditions(xm):
        i0 = int(np.argmin(np.abs(xm)))
        last = xm.size - 1
        s1, s2 = slice(0, 3), slice(3, 6)
        return [
            _projection_condition(0, s1, params_of, p0, 0, "stable"),
            _projection_condition(last, s1, params_of, p0, 1, "unstable"),
            _phase_condition(i0, s1, m, r),
            _projection_condition(0, s2, params_of, p0, 1, "stable"),
            _projection_condition(last, s2, params_of, p0, 0, "unstable"),
            _phase_condition(i0, s2, m, -r),
        ]

    guess = np.vstack([front.y, back_guess])
    sol = solve_bvp_adaptive(fun, jac, x, guess, p0, make_conditions, newton_tol=tol, mesh_tol=mesh_tol)
    prm = params_of(sol.p)
    common = dict(params=prm, bvp_residual=sol.defect, mesh_residual=sol.mesh_error, tol=tol)
    h1 = OrbitProfile(mesh=sol.x, y=sol.y[:3], kind="front", slopes=sol.f[:3], **common)
    h2 = OrbitProfile(mesh=sol.x, y=sol.y[3:], kind="back", slopes=sol.f[3:], **common)
    e1, e2 = _equilibrium_pair(prm)
    return LoopLocus(
        epsilon=epsilon, gamma0=prm.gamma, c_star=prm.c, h1=h1, h2=h2,
        splitting_residuals=splitting(h1, h2, prm), params=prm, e1=e1, e2=e2,
    )


def variational_kernel_certificate(h: OrbitProfile, params: ModelParams | None = None):
    """Two smallest singular values of the discretised variational operator.

    The operator is v' - A(h(x)) v with decaying boundary conditions; a
    one-dimensional numerical kernel (spanned by h') shows as
    ``sigma_2 >> sigma_1``.
    """
    from .melnikov import linear_bvp_matrix

    params = params or h.params
    src, dst = (0, 1) if h.kind == "front" else (1, 0)
    eqs = _equilibrium_pair(params)
    A, _ = linear_bvp_matrix(
        h, lambda J: J,
        left_rows=eqs[src].real_basis("stable", "left").T,
        right_rows=eqs[dst].real_basis("unstable", "left").T,
    )
    return smallest_singular_values(A, 2)


def smallest_singular_values(A, k=2):
    import scipy.sparse.linalg as spla

    lu = spla.splu(A.tocsc())
    n = A.shape[0]
    op = spla.LinearOperator(
        (n, n), matvec=lambda v: lu.solve(v), rmatvec=lambda v: lu.solve(v, trans="T"), dtype=float
    )
    s = spla.svds(op, k=k, which="LM", return_singular_vectors=False, random_state=0)
    return np.sort(1.0 / s)


# ------------------------------------------------------------ periodic orbits
@dataclass
class PeriodicMember:
    T: float
    mu_T: np.ndarray
    orbit: OrbitProfile
    L1: float
    L2: float

    @classmethod
    def from_orbit(cls, orbit: OrbitProfile, loop: LoopLocus) -> "PeriodicMember":
        """Rebuild a member from a saved periodic profile (T, L1, L2 read from its metadata)."""
        mu = np.array([orbit.params.gamma - loop.gamma0, orbit.params.c - loop.c_star])
        return cls(T=float(orbit.meta["T"]), mu_T=mu, orbit=orbit, L1=float(orbit.meta["L1"]),
                   L2=float(orbit.meta["L2"]))


@dataclass
class PeriodicFamily:
    loop: LoopLocus
    members: list
    failures: dict = field(default_factory=dict)

    @property
    def periods(self) -> np.ndarray:
        return np.array([m.T for m in self.members])


def anchor_sections(loop: LoopLocus):
    """Hyperplanes through h1(0), h2(0) with normals h1'(0), h2'(0)."""
    out = []
    for h in (loop.h1, loop.h2):
        point = h(0.0)[:, 0]
        normal = h.derivative(0.0)[:, 0]
        out.append((point, normal / np.linalg.norm(normal)))
    return out


def glued_guess(loop: LoopLocus, L1: float, L2: float):
    """Concatenate h1 on [-L1, L1] and h2 shifted to [L1, L1 + 2 L2]."""
    h1, h2 = loop.h1, loop.h2
    for h, L in ((h1, L1), (h2, L2)):
        if L > h.mesh[-1] or -L < h.mesh[0]:
            raise ValueError(f"passage length {L} exceeds the heteroclinic interval {h.interval}")
    x1 = h1.mesh[(h1.mesh > -L1) & (h1.mesh < L1)]
    x2 = h2.mesh[(h2.mesh > -L2) & (h2.mesh < L2)]
    x = np.concatenate([[-L1], x1, [L1], x2 + L1 + L2, [L1 + 2 * L2]])
    x = np.unique(x)
    y = np.empty((3, x.size))
    first = x <= L1
    y[:, first] = h1(x[first])
    y[:, ~first] = h2(x[~first] - L1 - L2)
    return x, y


def compute_periodic(loop: LoopLocus, T: float, *, split=0.5, tol=1e-11, mesh_tol=1e-9,
                     guess=None) -> PeriodicMember:
    """Periodic orbit of period T near the loop with unknowns (gamma, c).

    Passage lengths are L1 = split * T / 2 and L2 = T / 2 - L1; the orbit is
    anchored on the h1 section at x = 0 and on the h2 section at x = L1 + L2.
    """
    L1 = split * T / 2.0
    L2 = T / 2.0 - L1
    if guess is None:
        x, y = glued_guess(loop, L1, L2)
        p0 = np.array([loop.gamma0, loop.c_star])
    else:
        x, y = guess.mesh - guess.mesh[0] - L1, guess.y
        p0 = np.array([guess.params.gamma, guess.params.c])
    base = loop.params
    free = ("gamma", "c")

    def params_of(p):
        return base.replace(gamma=float(p[0]), c=float(p[1]))

    fun, jac = _tw_fun(params_of), _tw_jac(params_of, free)
    (q1, n1), (q2, n2) = anchor_sections(loop)

    def periodic(Ysel, p):
        r = Ysel[:, 0] - Ysel[:, 1]
        dY = np.zeros((3, 3, 2))
        dY[:, :, 0] = np.eye(3)
        dY[:, :, 1] = -np.eye(3)
        return r, dY, np.zeros((3, 2))

    def make_conditions(xm):
        i0 = int(np.argmin(np.abs(xm)))
        i1 = int(np.argmin(np.abs(xm - (L1 + L2))))
        return [
            Condition([0, xm.size - 1], periodic, "periodic"),
            _phase_condition(i0, slice(0, 3), q1, n1),
            _phase_condition(i1, slice(0, 3), q2, n2),
        ]

    sol = solve_bvp_adaptive(fun, jac, x, y, p0, make_conditions, newton_tol=tol, mesh_tol=mesh_tol)
    prm = params_of(sol.p)
    orbit = OrbitProfile(
        mesh=sol.x, y=sol.y, kind="periodic", params=prm, slopes=sol.f,
        bvp_residual=sol.defect, mesh_residual=sol.mesh_error, tol=tol,
        meta={"T": float(T), "L1": float(L1), "L2": float(L2),
              "closure": float(np.max(np.abs(sol.y[:, 0] - sol.y[:, -1])))},
    )
    mu = np.array([prm.gamma - loop.gamma0, prm.c - loop.c_star])
    return PeriodicMember(T=float(T), mu_T=mu, orbit=orbit, L1=L1, L2=L2)


def continue_periodic(loop: LoopLocus, T_targets, *, split=0.5, tol=1e-11, mesh_tol=1e-9,
                      threads=1, tube_level=0.05) -> PeriodicFamily:
    """Periodic orbits for each target period; failures are recorded per period."""
    alpha = loop.alpha
    targets = sorted(float(T) for T in T_targets)
    for T in targets:
        if np.exp(-alpha * T / 4.0) > tube_level:
            raise ValueError(
                f"T={T} is below the large-period threshold: exp(-alpha T/4) = "
                f"{np.exp(-alpha * T / 4.0):.3g} > {tube_level}"
            )

    def solve(T):
        try:
            return compute_periodic(loop, T, split=split, tol=tol, mesh_tol=mesh_tol)
        except (ConvergenceError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("periodic solve failed for T=%g: %s", T, exc)
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve, targets))
    else:
        results = [solve(T) for T in targets]
    members, failures = [], {}
    for T, res in zip(targets, results):
        if isinstance(res, Exception):
            failures[T] = str(res)
        else:
            members.append(res)
    return PeriodicFamily(loop=loop, members=members, failures=failures)


def sup_distance_to_loop(member: PeriodicMember, loop: LoopLocus) -> float:
    """max over |x| <= L1 of |p - h1| plus max over the h2 passage of |p - h2(. - L1 - L2)|."""
    p = member.orbit
    L1, L2 = member.L1, member.L2
    xs1 = p.mesh[(p.mesh >= -L1) & (p.mesh <= L1)]
    xs2 = p.mesh[(p.mesh >= L1) & (p.mesh <= L1 + 2 * L2)]
    d1 = np.max(np.linalg.norm(p(xs1) - loop.h1(xs1), axis=0))
    d2 = np.max(np.linalg.norm(p(xs2) - loop.h2(xs2 - L1 - L2), axis=0))
    return float(d1 + d2)


def tube_fraction(member: PeriodicMember, loop: LoopLocus, delta=0.05) -> float:
    """Fraction of arclength of the periodic orbit within ``delta`` of the loop."""
    p = member.orbit
    L1, L2 = member.L1, member.L2
    x = np.linspace(p.mesh[0], p.mesh[-1], 20001)
    pts = p(x)
    ref = np.where(x <= L1, 0, 1)
    dist = np.empty(x.size)
    d1 = np.linalg.norm(pts - loop.h1(np.clip(x, loop.h1.mesh[0], loop.h1.mesh[-1])), axis=0)
    d2 = np.linalg.norm(
        pts - loop.h2(np.clip(x - L1 - L2, loop.h2.mesh[0], loop.h2.mesh[-1])), axis=0
    )
    dist = np.where(ref == 0, d1, d2)
    speed = np.linalg.norm(p.derivative(x), axis=0)
    seg = 0.5 * (speed[1:] + speed[:-1]) * np.diff(x)
    inside = 0.5 * ((dist[1:] <= delta).astype(float) + (dist[:-1] <= delta))
    return float(np.sum(seg * inside) / np.sum(seg))


def refine_profile(profile: OrbitProfile) -> OrbitProfile:
    """Same heteroclinic re-solved on the mesh with every interval halved."""
    x = profile.mesh
    x2 = np.sort(np.concatenate([x, 0.5 * (x[1:] + x[:-1])]))
    guess = OrbitProfile(mesh=x2, y=profile(x2), kind=profile.kind, params=profile.params)
    solver = compute_front if profile.kind == "front" else compute_back
    return solver(profile.params, guess, tol=profile.tol, mesh_tol=np.inf)
