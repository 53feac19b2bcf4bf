"""FitzHugh-Nagumo kinetics and the traveling-wave vector field.

The traveling-wave ODE in the co-moving frame is

    u' = v,   v' = c v - f(u) + w,   w' = (eps / c) (u - gamma w),

with the cubic ``f(u) = u (1 - u) (u - a)``.  Everything here is a pure
function of its arguments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

# Upper end of the slow-fast regime.  Configuration value, not derived.
EPSILON_STAR = 0.05

# |Im nu| below this (relative) bound counts as a real eigenvalue.
REAL_TOL = 1e-9


class DegenerateEquilibriumError(ValueError):
    """Raised for a double root of f(u) = u / gamma (saddle-node of equilibria)."""


class LeadingEigenvalueError(ValueError):
    """Raised when a leading eigenvalue is complex or multiple.

    The closed-form critical-curve expansions need real, simple leading
    eigenvalues at both equilibria; oscillatory tails are detected only.
    """


@dataclass(frozen=True)
class ModelParams:
    a: float
    gamma: float
    epsilon: float
    c: float

    def __post_init__(self):
        if not 0.0 < self.a < 0.5:
            raise ValueError(f"a must lie in (0, 1/2), got {self.a}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.epsilon >= 0.0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.c == 0.0 or not np.isfinite(self.c):
            raise ValueError("wave speed c must be finite and nonzero")

    @property
    def u_bar(self) -> float:
        """Inflection point of the cubic."""
        return (1.0 + self.a) / 3.0

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _a_of(params) -> float:
    return params.a if isinstance(params, ModelParams) else float(params)


def reaction(u, params):
    a = _a_of(params)
    return u * (1.0 - u) * (u - a)


def reaction_deriv(u, params):
    a = _a_of(params)
    return -3.0 * u * u + 2.0 * (1.0 + a) * u - a


def reaction_second_deriv(u, params):
    a = _a_of(params)
    return -6.0 * u + 2.0 * (1.0 + a)


def tw_vector_field(state, params: ModelParams):
    """Right-hand side of the traveling-wave ODE; ``state`` is (3,) or (3, m)."""
    u, v, w = state[0], state[1], state[2]
    c, eps, g = params.c, params.epsilon, params.gamma
    return np.array([v, c * v - reaction(u, params) + w, (eps / c) * (u - g * w)])


def tw_jacobian(state, params: ModelParams):
    """Exact Jacobian of :func:`tw_vector_field`, shape (3, 3) or (3, 3, m)."""
    state = np.asarray(state, dtype=float)
    u = state[0]
    c, eps, g = params.c, params.epsilon, params.gamma
    one = np.ones_like(u)
    zero = np.zeros_like(u)
    return np.array(
        [
            [zero, one, zero],
            [-reaction_deriv(u, params), c * one, one],
            [(eps / c) * one, zero, -(eps * g / c) * one],
        ]
    )


def tw_param_jacobian(state, params: ModelParams):
    """Derivative of the vector field with respect to (gamma, c), shape (3, 2[, m])."""
    state = np.asarray(state, dtype=float)
    u, v, w = state[0], state[1], state[2]
    c, eps, g = params.c, params.epsilon, params.gamma
    zero = np.zeros_like(u)
    d_gamma = np.array([zero, zero, -(eps / c) * w])
    d_c = np.array([zero, v, -(eps / c**2) * (u - g * w)])
    return np.stack([d_gamma, d_c], axis=1)


@dataclass(frozen=True)
class CouplingMatrixB:
    matrix: np.ndarray
    derivation_note: str


def coupling_matrix(params: ModelParams) -> CouplingMatrixB:
    """lambda-coefficient of the first-order eigenvalue system in (U, U_x, W).

    The w-row carries -1/c because the w-equation is first order in x.
    """
    B = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0 / params.c]])
    note = (
        "lambda U = U'' - c U' + f'(phi) U - W and lambda W = -c W' + eps (U - gamma W) "
        "rewritten for (U, U', W): U'' gains +lambda U, W' gains -lambda W / c."
    )
    return CouplingMatrixB(B, note)


@dataclass
class Equilibrium:
    point: np.ndarray
    jacobian_eigs: np.ndarray
    alpha_s: float = np.nan
    alpha_u: float = np.nan
    leading_stable_vec: np.ndarray | None = None
    leading_unstable_vec: np.ndarray | None = None
    # left eigenvectors for the leading stable / unstable eigenvalues
    adjoint_leading_vecs: tuple | None = None
    right_vecs: np.ndarray | None = None
    left_vecs: np.ndarray | None = None
    hyperbolic: bool = True
    a1_holds: bool = True
    diagnostics: list = field(default_factory=list)

    @property
    def stable_indices(self):
        return [i for i, nu in enumerate(self.jacobian_eigs) if nu.real < -_center_tol(nu)]

    @property
    def unstable_indices(self):
        return [i for i, nu in enumerate(self.jacobian_eigs) if nu.real > _center_tol(nu)]

    def real_basis(self, which: str, side: str = "right") -> np.ndarray:
        """Real basis (columns) of the stable/unstable eigenspace or its left counterpart.

        Complex pairs contribute their real and imaginary parts.
        """
        idx = self.stable_indices if which == "stable" else self.unstable_indices
        vecs = self.right_vecs if side == "right" else self.left_vecs
        cols = []
        skip = set()
        for i in idx:
            if i in skip:
                continue
            nu = self.jacobian_eigs[i]
            vec = vecs[:, i]
            if abs(nu.imag) <= REAL_TOL * (1 + abs(nu)):
                cols.append(vec.real)
            else:
                partner = min(
                    (j for j in idx if j != i), key=lambda j: abs(self.jacobian_eigs[j] - nu.conjugate())
                )
                skip.add(partner)
                cols.extend([vec.real, vec.imag])
        return np.array(cols).T if cols else np.zeros((len(self.point), 0))

    def require_hyperbolic(self):
        if not self.hyperbolic:
            raise DegenerateEquilibriumError(
                f"equilibrium {self.point} is not hyperbolic: eigenvalues {self.jacobian_eigs}"
            )

    def require_a1(self):
        if not self.a1_holds:
            raise LeadingEigenvalueError("; ".join(self.diagnostics) or "leading eigenvalues are not real and simple")


def _center_tol(nu) -> float:
    return 1e-10 * (1.0 + abs(nu))


def _is_real(nu) -> bool:
    return abs(nu.imag) <= REAL_TOL * (1.0 + abs(nu))


def _fix_sign(vec):
    """Unit length, first non-negligible component positive (real part)."""
    vec = vec / np.linalg.norm(vec)
    if np.all(np.abs(vec.imag) < 1e-14):
        vec = vec.real.astype(complex)
    for comp in vec:
        if abs(comp) > 1e-12:
            # rotate the phase so this component becomes real positive
            return vec * (abs(comp) / comp)
    return vec


def spectral_split(eq_point, params: ModelParams) -> Equilibrium:
    """Eigen-data of the Jacobian at an equilibrium.

    Right eigenvectors are unit vectors with the first nonzero component
    positive; left eigenvectors are unit vectors oriented so that
    ``<w_j, v_j> > 0``.  Eigenvalues are sorted by real part.
    """
    point = np.asarray(eq_point, dtype=float)
    J = tw_jacobian(point, params)
    nus, V = np.linalg.eig(J)
    order = np.lexsort((nus.imag, nus.real))
    nus, V = nus[order].astype(complex), V[:, order].astype(complex)
    for i in range(V.shape[1]):
        V[:, i] = _fix_sign(V[:, i])
    # rows of inv(V) are left eigenvectors, biorthogonal to the columns of V
    W = np.linalg.inv(V).conj().T
    for i in range(W.shape[1]):
        w = W[:, i] / np.linalg.norm(W[:, i])
        pairing = np.vdot(w, V[:, i])
        W[:, i] = w * (abs(pairing) / pairing.conjugate())

    eq = Equilibrium(point=point, jacobian_eigs=nus, right_vecs=V, left_vecs=W)
    centers = [nu for nu in nus if abs(nu.real) <= _center_tol(nu)]
    if centers:
        eq.hyperbolic = False
        eq.diagnostics.append(f"eigenvalues on the imaginary axis: {centers}")

    stable, unstable = eq.stable_indices, eq.unstable_indices
    if stable:
        rates = np.array([-nus[i].real for i in stable])
        lead = stable[int(np.argmin(rates))]
        eq.alpha_s = float(rates.min())
        eq.leading_stable_vec = V[:, lead].real if _is_real(nus[lead]) else V[:, lead]
        ties = [i for i in stable if abs(-nus[i].real - eq.alpha_s) <= 1e-9 * (1 + eq.alpha_s)]
        if not _is_real(nus[lead]) or len(ties) > 1:
            eq.a1_holds = False
            eq.diagnostics.append(
                f"leading stable eigenvalue {nus[lead]} is not real and simple "
                "(oscillatory tail; closed-form expansions do not apply)"
            )
    if unstable:
        rates = np.array([nus[i].real for i in unstable])
        lead_u = unstable[int(np.argmin(rates))]
        eq.alpha_u = float(rates.min())
        eq.leading_unstable_vec = V[:, lead_u].real if _is_real(nus[lead_u]) else V[:, lead_u]
        ties = [i for i in unstable if abs(nus[i].real - eq.alpha_u) <= 1e-9 * (1 + eq.alpha_u)]
        if not _is_real(nus[lead_u]) or len(ties) > 1:
            eq.a1_holds = False
            eq.diagnostics.append(f"leading unstable eigenvalue {nus[lead_u]} is not real and simple")
    if stable and unstable:
        ws = W[:, lead]
        wu = W[:, lead_u]
        eq.adjoint_leading_vecs = (
            ws.real if _is_real(nus[lead]) else ws,
            wu.real if _is_real(nus[lead_u]) else wu,
        )
    return eq


def find_equilibria(params: ModelParams) -> list[Equilibrium]:
    """All equilibria (u, 0, u / gamma), ordered by u, with eigen-data attached.

    A double root of ``f(u) = u / gamma`` raises
    :class:`DegenerateEquilibriumError`.
    """
    a, g = params.a, params.gamma
    # u = 0 or u^2 - (1 + a) u + a + 1/gamma = 0
    disc = (1.0 - a) ** 2 - 4.0 / g
    roots = [0.0]
    scale = max(1.0, (1.0 + a) ** 2)
    if abs(disc) <= 1e-13 * scale:
        raise DegenerateEquilibriumError(
            f"double root of f(u) = u/gamma at u = {(1 + a) / 2} (disc = {disc:.3e})"
        )
    if disc > 0:
        s = np.sqrt(disc)
        b = -(1.0 + a)
        q = -0.5 * (b - s)  # numerically stable quadratic roots
        r1, r2 = q, (a + 1.0 / g) / q
        roots.extend(sorted([r1, r2]))
    polished = []
    for u in roots:
        for _ in range(3):
            gval = reaction(u, a) - u / g
            dg = reaction_deriv(u, a) - 1.0 / g
            if dg == 0.0:
                break
            u = u - gval / dg
        polished.append(u)
    return [spectral_split(np.array([u, 0.0, u / g]), params) for u in sorted(polished)]


def symmetric_gamma(a: float) -> float:
    """gamma for which the outer equilibria are symmetric about the inflection point."""
    if not 0.0 < a < 0.5:
        raise ValueError(f"a must lie in (0, 1/2), got {a}")
    ub = (1.0 + a) / 3.0
    return ub / reaction(ub, a)


def symmetry_map(state, params: ModelParams):
    """Point reflection through the inflection equilibrium (u_bar, 0, u_bar / gamma).

    Maps solutions to solutions exactly when gamma = symmetric_gamma(a).
    """
    state = np.asarray(state, dtype=float)
    ub = params.u_bar
    center = np.array([ub, 0.0, ub / params.gamma])
    if state.ndim == 2:
        center = center[:, None]
    return 2.0 * center - state
