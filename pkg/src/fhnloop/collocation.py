"""Fourth-order collocation for boundary-value problems with free parameters.

Three-point Lobatto collocation (Hermite-Simpson): the solution is a C1
piecewise cubic that satisfies the ODE at every mesh node and interval
midpoint.  Unknowns are the node values plus any free parameters; the
nonlinear system is closed by user conditions that may reference any node,
so interior phase conditions and periodicity are handled uniformly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Newton iteration failed to reach the requested tolerance."""


@dataclass
class Condition:
    """Scalar conditions on a handful of mesh nodes.

    ``func(Y_sel, p)`` receives the values at ``nodes`` as an array of shape
    (n, len(nodes)) and returns ``(residual, d_residual_dY, d_residual_dp)``
    with shapes (r,), (r, n, len(nodes)) and (r, k).
    """

    nodes: Sequence[int]
    func: Callable
    name: str = ""


@dataclass
class CollocationResult:
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    f: np.ndarray
    iterations: int
    defect: float  # max ODE residual at the collocation midpoints
    condition_residual: float
    converged: bool
    history: list = field(default_factory=list)

    def __call__(self, xq):
        return hermite_eval(self.x, self.y, self.f, xq)


def hermite_eval(x, y, f, xq, derivative=False):
    """Evaluate the C1 cubic with node values ``y`` and slopes ``f`` at ``xq``."""
    xq = np.atleast_1d(np.asarray(xq, dtype=float))
    i = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, len(x) - 2)
    h = x[i + 1] - x[i]
    t = (xq - x[i]) / h
    y0, y1, f0, f1 = y[:, i], y[:, i + 1], f[:, i], f[:, i + 1]
    if not derivative:
        h00 = 2 * t**3 - 3 * t**2 + 1
        h10 = t**3 - 2 * t**2 + t
        h01 = -2 * t**3 + 3 * t**2
        h11 = t**3 - t**2
        return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
    d00 = (6 * t**2 - 6 * t) / h
    d10 = 3 * t**2 - 4 * t + 1
    d01 = (-6 * t**2 + 6 * t) / h
    d11 = 3 * t**2 - 2 * t
    return d00 * y0 + d10 * f0 + d01 * y1 + d11 * f1


def _midpoint_data(fun, x, y, f, p):
    h = np.diff(x)
    xm = x[:-1] + 0.5 * h
    ym = 0.5 * (y[:, :-1] + y[:, 1:]) - 0.125 * h * (f[:, 1:] - f[:, :-1])
    fm = fun(xm, ym, p)
    return h, xm, ym, fm


def collocation_residual(fun, x, y, p):
    f = fun(x, y, p)
    h, xm, ym, fm = _midpoint_data(fun, x, y, f, p)
    res = y[:, 1:] - y[:, :-1] - (h / 6.0) * (f[:, :-1] + 4.0 * fm + f[:, 1:])
    return res, f, (h, xm, ym, fm)


def _assemble(fun, jac, x, y, p, conditions):
    n, N1 = y.shape
    N = N1 - 1
    k = p.size
    res, f, (h, xm, ym, fm) = collocation_residual(fun, x, y, p)
    Jn, Pn = jac(x, y, p)
    Jm, Pm = jac(xm, ym, p)
    eye = np.eye(n)[:, :, None]

    # dy_m/dy_i = I/2 + h/8 J_i ;  dy_m/dy_{i+1} = I/2 - h/8 J_{i+1}
    Ji, Ji1 = Jn[:, :, :-1], Jn[:, :, 1:]
    dym_dyi = 0.5 * eye + 0.125 * h * Ji
    dym_dyi1 = 0.5 * eye - 0.125 * h * Ji1
    JmA = np.einsum("abm,bcm->acm", Jm, dym_dyi)
    JmB = np.einsum("abm,bcm->acm", Jm, dym_dyi1)
    blk_i = -eye - (h / 6.0) * (Ji + 4.0 * JmA)
    blk_i1 = eye - (h / 6.0) * (Ji1 + 4.0 * JmB)

    rows, cols, vals = [], [], []
    r_idx = np.arange(N)[:, None, None] * n + np.arange(n)[None, :, None]
    c_off = np.arange(n)[None, None, :]
    base = np.broadcast_to(r_idx, (N, n, n))
    ci = np.arange(N)[:, None, None] * n + c_off
    rows += [base.ravel(), base.ravel()]
    cols += [np.broadcast_to(ci, (N, n, n)).ravel(), np.broadcast_to(ci + n, (N, n, n)).ravel()]
    vals += [np.moveaxis(blk_i, 2, 0).ravel(), np.moveaxis(blk_i1, 2, 0).ravel()]

    if k:
        dym_dp = 0.125 * h * (Pn[:, :, :-1] - Pn[:, :, 1:])
        blk_p = -(h / 6.0) * (Pn[:, :, :-1] + 4.0 * (Pm + np.einsum("abm,bcm->acm", Jm, dym_dp)) + Pn[:, :, 1:])
        rp = np.broadcast_to(np.arange(N)[:, None, None] * n + np.arange(n)[None, :, None], (N, n, k))
        cp = np.broadcast_to(n * N1 + np.arange(k)[None, None, :], (N, n, k))
        rows.append(rp.ravel())
        cols.append(cp.ravel())
        vals.append(np.moveaxis(blk_p, 2, 0).ravel())

    cond_res = []
    row0 = n * N
    for cond in conditions:
        nodes = np.asarray(cond.nodes, dtype=int)
        r, dY, dp = cond.func(y[:, nodes], p)
        r = np.atleast_1d(r)
        nr = r.size
        dY = np.asarray(dY).reshape(nr, n, len(nodes))
        rr = row0 + np.arange(nr)
        for j, node in enumerate(nodes):
            rows.append(np.repeat(rr, n))
            cols.append(np.tile(node * n + np.arange(n), nr))
            vals.append(dY[:, :, j].ravel())
        if k:
            dp = np.asarray(dp).reshape(nr, k)
            rows.append(np.repeat(rr, k))
            cols.append(np.tile(n * N1 + np.arange(k), nr))
            vals.append(dp.ravel())
        cond_res.append(r)
        row0 += nr
    F = np.concatenate([res.T.ravel()] + cond_res)
    size = n * N1 + k
    if row0 != size:
        raise ValueError(f"system is not square: {row0} equations for {size} unknowns")
    A = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )
    return F, A, res, np.concatenate(cond_res) if cond_res else np.zeros(0)


def _residual_only(fun, x, y, p, conditions):
    res, _, _ = collocation_residual(fun, x, y, p)
    cond_res = [np.atleast_1d(c.func(y[:, np.asarray(c.nodes, int)], p)[0]) for c in conditions]
    return np.concatenate([res.T.ravel()] + cond_res), res


def newton_solve(
    fun,
    jac,
    x,
    y0,
    p0,
    conditions,
    *,
    tol=1e-11,
    max_iter=40,
    min_step=1e-14,
    raise_on_failure=True,
) -> CollocationResult:
    """Damped Newton on the collocation system with Armijo backtracking.

    Convergence is declared when the largest collocation defect (residual
    divided by interval length) and the largest condition residual are both
    below ``tol``.  Stagnation (Newton step below ``min_step``) or
    ``max_iter`` iterations without convergence raise :class:`ConvergenceError`.
    """
    x = np.asarray(x, dtype=float)
    y = np.array(y0, dtype=float, copy=True)
    p = np.array(p0, dtype=float, copy=True).ravel()
    n, N1 = y.shape
    h = np.diff(x)
    history = []
    converged = False
    for it in range(max_iter + 1):
        F, A, res, cres = _assemble(fun, jac, x, y, p, conditions)
        defect = float(np.max(np.abs(res / h))) if res.size else 0.0
        cmax = float(np.max(np.abs(cres))) if cres.size else 0.0
        history.append((defect, cmax))
        logger.debug("newton it=%d defect=%.3e cond=%.3e", it, defect, cmax)
        if defect <= tol and cmax <= tol:
            converged = True
            break
        if it == max_iter:
            break
        try:
            dz = spla.spsolve(A, -F)
        except RuntimeError as exc:  # singular factorization
            raise ConvergenceError(f"singular Newton matrix: {exc}") from exc
        if not np.all(np.isfinite(dz)):
            raise ConvergenceError("Newton step is not finite (singular Jacobian?)")
        dY = dz[: n * N1].reshape(N1, n).T
        dp = dz[n * N1 :]
        phi0 = 0.5 * float(F @ F)
        t = 1.0
        while True:
            y_try, p_try = y + t * dY, p + t * dp
            try:
                F_try, _ = _residual_only(fun, x, y_try, p_try, conditions)
                phi = 0.5 * float(F_try @ F_try)
            except (ValueError, ArithmeticError, np.linalg.LinAlgError):
                # trial parameters left the admissible region
                phi = np.inf
            if np.isfinite(phi) and phi <= (1.0 - 1e-4 * t) * phi0:
                break
            t *= 0.5
            if t < 1e-6:
                break
        step = t * float(np.max(np.abs(dz))) if dz.size else 0.0
        y, p = y_try, p_try
        if step <= min_step:
            F, A, res, cres = _assemble(fun, jac, x, y, p, conditions)
            defect = float(np.max(np.abs(res / h)))
            cmax = float(np.max(np.abs(cres))) if cres.size else 0.0
            converged = defect <= tol and cmax <= tol
            history.append((defect, cmax))
            break
    f = fun(x, y, p)
    result = CollocationResult(
        x=x, y=y, p=p, f=f, iterations=it, defect=history[-1][0],
        condition_residual=history[-1][1], converged=converged, history=history,
    )
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"Newton did not converge in {it} iterations: defect={history[-1][0]:.3e}, "
            f"conditions={history[-1][1]:.3e}"
        )
    return result


def mesh_error(fun, x, y, f, p):
    """Continuous ODE residual of the piecewise cubic away from the collocation points.

    Evaluated at the two points ``t = 1/2 +- sqrt(3/20)`` inside each interval
    (the residual vanishes at nodes and midpoints), scaled by ``1 + |f|``.
    """
    h = np.diff(x)
    errs = []
    for t in (0.5 - np.sqrt(0.15), 0.5 + np.sqrt(0.15)):
        xq = x[:-1] + t * h
        yq = hermite_eval(x, y, f, xq)
        dq = hermite_eval(x, y, f, xq, derivative=True)
        fq = fun(xq, yq, p)
        errs.append(np.max(np.abs(dq - fq) / (1.0 + np.abs(fq)), axis=0))
    return np.maximum(*errs)


def refine_mesh(x, err, tol, keep=(), max_nodes=200000):
    """Split intervals whose error exceeds ``tol``; 4th order so error ~ h^4."""
    pieces = [x[:1]]
    for i in range(len(x) - 1):
        e = err[i]
        if e > tol:
            m = int(min(8, np.ceil((e / tol) ** 0.25 * 1.2)))
            m = max(m, 2)
            pieces.append(np.linspace(x[i], x[i + 1], m + 1)[1:])
        else:
            pieces.append(x[i + 1 : i + 2])
    new = np.concatenate(pieces)
    if new.size > max_nodes:
        raise ConvergenceError(f"mesh refinement exceeded {max_nodes} nodes")
    return new


def solve_bvp_adaptive(
    fun,
    jac,
    x,
    y0,
    p0,
    make_conditions,
    *,
    newton_tol=1e-11,
    mesh_tol=1e-7,
    max_refinements=12,
    max_nodes=200000,
    max_iter=40,
):
    """Newton solve, then refine until the off-collocation residual is below ``mesh_tol``.

    ``make_conditions(x)`` rebuilds the condition list for a mesh so that node
    indices of interior conditions follow the refinement.
    """
    x = np.asarray(x, float)
    y = np.asarray(y0, float)
    p = np.asarray(p0, float)
    for level in range(max_refinements + 1):
        sol = newton_solve(fun, jac, x, y, p, make_conditions(x), tol=newton_tol, max_iter=max_iter)
        err = mesh_error(fun, sol.x, sol.y, sol.f, sol.p)
        logger.debug("refinement %d: nodes=%d max mesh error=%.3e", level, x.size, err.max())
        if err.max() <= mesh_tol:
            sol.mesh_error = float(err.max())
            return sol
        x_new = refine_mesh(sol.x, err, mesh_tol, max_nodes=max_nodes)
        y = hermite_eval(sol.x, sol.y, sol.f, x_new)
        x, p = x_new, sol.p
    sol.mesh_error = float(err.max())
    logger.warning("mesh tolerance %.1e not reached (%.3e)", mesh_tol, err.max())
    return sol
