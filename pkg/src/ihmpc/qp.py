"""Box-constrained convex QP: ADMM with active-set polishing, and its derivative.

Problem::

    minimize    1/2 z'Hz + q'z
    subject to  lb <= Mz <= ub

Sign convention for the duals: ``Hz + q + M'y = 0`` with ``y_i > 0`` on an
active upper bound and ``y_i < 0`` on an active lower bound.
"""
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from . import constants as C
from .errors import QpError, SingularKkt
from .graph import register_rule
from .linalg import bound_vector, is_infinite, is_symmetric

SOLVED = "solved"
MAX_ITER = "max-iter"
PRIMAL_INFEASIBLE = "primal-infeasible"
DUAL_INFEASIBLE = "dual-infeasible"


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    q: np.ndarray
    M: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        q = np.asarray(self.q, dtype=float).reshape(-1, 1)
        d = q.shape[0]
        M = np.asarray(self.M, dtype=float).reshape(-1, d)
        lb, ub = bound_vector(self.lb), bound_vector(self.ub)
        if H.shape != (d, d):
            raise ValueError(f"H has shape {H.shape}, expected {(d, d)}")
        if lb.shape != (M.shape[0], 1) or ub.shape != (M.shape[0], 1):
            raise ValueError("bound vectors must have one entry per constraint row")
        if not (np.isfinite(H).all() and np.isfinite(q).all() and np.isfinite(M).all()):
            raise ValueError("H, q and M must be finite")
        if not is_symmetric(H):
            raise ValueError("H is not symmetric")
        if np.any(lb > ub):
            raise ValueError("lb > ub for some constraint")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def dims(self):
        return self.M.shape[1], self.M.shape[0]

    def objective(self, z):
        z = np.asarray(z).reshape(-1, 1)
        return (0.5 * z.T @ self.H @ z + self.q.T @ z).item()


@dataclass(frozen=True)
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = C.QP_EPS_ABS
    eps_rel: float = C.QP_EPS_REL
    eps_prim_inf: float = C.QP_EPS_ABS
    eps_dual_inf: float = C.QP_EPS_ABS
    max_iter: int = C.QP_MAX_ITER
    check_interval: int = 25
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    polish: bool = True
    polish_refine_iter: int = 50
    active_threshold: float = C.QP_ACTIVE


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    s: np.ndarray
    active_upper: tuple
    active_lower: tuple
    primal_residual: float
    dual_residual: float
    status: str
    iterations: int = 0
    polished: bool = False
    objective: float = np.nan
    certificate: np.ndarray = field(default=None, repr=False)


def _residuals(p, z, s, y):
    Hz, Mty, Mz = p.H @ z, p.M.T @ y, p.M @ z
    prim = float(np.max(np.abs(Mz - s), initial=0.0))
    dual = float(np.max(np.abs(Hz + p.q + Mty), initial=0.0))
    prim_scale = max(np.max(np.abs(Mz), initial=0.0), np.max(np.abs(s), initial=0.0))
    dual_scale = max(np.max(np.abs(Hz), initial=0.0), np.max(np.abs(Mty), initial=0.0),
                     np.max(np.abs(p.q), initial=0.0))
    return prim, dual, prim_scale, dual_scale


def _converged(st, prim, dual, prim_scale, dual_scale):
    return (prim <= st.eps_abs + st.eps_rel * prim_scale
            and dual <= st.eps_abs + st.eps_rel * dual_scale)


def classify_active(sol, threshold=C.QP_ACTIVE):
    """Split strongly active constraints by dual sign: ``(upper, lower)`` index tuples."""
    y = np.asarray(sol.y).ravel()
    upper = tuple(int(i) for i in np.flatnonzero(y > threshold))
    lower = tuple(int(i) for i in np.flatnonzero(y < -threshold))
    return upper, lower


def _rho_vector(p, rho):
    lb, ub = p.lb.ravel(), p.ub.ravel()
    r = np.full(lb.shape, rho)
    r[np.abs(ub - lb) < 1e-12] = 1e3 * rho
    r[is_infinite(lb) & is_infinite(ub)] = 1e-6
    return r.reshape(-1, 1)


def _factor(p, sigma, rho_vec):
    d = p.H.shape[0]
    K = p.H + sigma * np.eye(d) + p.M.T @ (rho_vec * p.M)
    return sla.cho_factor(K)


def _project(v, p):
    return np.minimum(np.maximum(v, p.lb), p.ub)


def qp_solve(p, settings=None):
    """Solve ``p`` with ADMM; the iterate is polished on its guessed active set.

    Polishing is attempted every ``check_interval`` iterations; a polished
    point that meets the termination tolerances ends the solve.
    """
    st = settings or QpSettings()
    d, c = p.dims
    z = np.zeros((d, 1))
    s = np.zeros((c, 1))
    y = np.zeros((c, 1))
    rho = st.rho
    rho_vec = _rho_vector(p, rho)
    fac = _factor(p, st.sigma, rho_vec)
    best = None

    for it in range(1, st.max_iter + 1):
        z_prev, y_prev = z, y
        rhs = st.sigma * z - p.q + p.M.T @ (rho_vec * s - y)
        z_tilde = sla.cho_solve(fac, rhs)
        s_tilde = p.M @ z_tilde
        z = st.alpha * z_tilde + (1 - st.alpha) * z
        s_relax = st.alpha * s_tilde + (1 - st.alpha) * s
        s = _project(s_relax + y / rho_vec, p)
        y = y + rho_vec * (s_relax - s)

        if it % st.check_interval and it != st.max_iter:
            continue

        prim, dual, ps, ds = _residuals(p, z, s, y)
        if best is None or max(prim, dual) < max(best[3], best[4]):
            best = (z.copy(), s.copy(), y.copy(), prim, dual)
        if st.polish:
            pol = polish(p, z, s, y, st)
            if pol is not None:
                return replace(pol, iterations=it)
        if _converged(st, prim, dual, ps, ds):
            return _make_solution(p, z, s, y, prim, dual, SOLVED, it, False, st)

        cert = _primal_infeasible(p, y - y_prev, st)
        if cert is not None:
            sol = _make_solution(p, z, s, y, prim, dual, PRIMAL_INFEASIBLE, it, False, st)
            raise QpError("problem is primal infeasible", replace(sol, certificate=cert))
        cert = _dual_infeasible(p, z - z_prev, st)
        if cert is not None:
            sol = _make_solution(p, z, s, y, prim, dual, DUAL_INFEASIBLE, it, False, st)
            raise QpError("problem is dual infeasible", replace(sol, certificate=cert))

        if st.adaptive_rho:
            new_rho = rho * np.sqrt((prim / (ps + 1e-30)) / (dual / (ds + 1e-30) + 1e-30))
            new_rho = float(np.clip(new_rho, 1e-6, 1e6))
            if new_rho > rho * st.adaptive_rho_tolerance or new_rho < rho / st.adaptive_rho_tolerance:
                rho = new_rho
                rho_vec = _rho_vector(p, rho)
                fac = _factor(p, st.sigma, rho_vec)

    z, s, y, prim, dual = best
    sol = _make_solution(p, z, s, y, prim, dual, MAX_ITER, st.max_iter, False, st)
    raise QpError(f"ADMM hit the iteration cap ({st.max_iter})", sol)


def _make_solution(p, z, s, y, prim, dual, status, it, polished, st):
    upper, lower = classify_active(QpSolution(z, y, s, (), (), 0, 0, status), st.active_threshold)
    return QpSolution(z, y, p.M @ z if polished else s, upper, lower, prim, dual,
                      status, it, polished, p.objective(z))


def _primal_infeasible(p, dy, st):
    norm = np.max(np.abs(dy), initial=0.0)
    if norm == 0.0:
        return None
    dy = dy.copy()
    dy[is_infinite(p.ub) & (dy > 0)] = 0.0
    dy[is_infinite(p.lb) & (dy < 0)] = 0.0
    if np.max(np.abs(p.M.T @ dy), initial=0.0) > st.eps_prim_inf * norm:
        return None
    ub = np.where(is_infinite(p.ub), 0.0, p.ub)
    lb = np.where(is_infinite(p.lb), 0.0, p.lb)
    support = (ub.T @ np.maximum(dy, 0) + lb.T @ np.minimum(dy, 0)).item()
    if support < -st.eps_prim_inf * norm:
        return dy / norm
    return None


def _dual_infeasible(p, dz, st):
    norm = np.max(np.abs(dz), initial=0.0)
    if norm == 0.0:
        return None
    tol = st.eps_dual_inf * norm
    if np.max(np.abs(p.H @ dz), initial=0.0) > tol or (p.q.T @ dz).item() > -tol:
        return None
    Mdz = p.M @ dz
    ok_up = is_infinite(p.ub) | (Mdz <= tol)
    ok_lo = is_infinite(p.lb) | (Mdz >= -tol)
    if np.all(ok_up & ok_lo):
        return dz / norm
    return None


def solve_reduced_kkt(H, MA, rhs_top, rhs_bottom):
    """Solve ``[[H, MA'], [MA, 0]] [z; y] = [rhs_top; rhs_bottom]``."""
    d, k = H.shape[0], MA.shape[0]
    K = np.zeros((d + k, d + k))
    K[:d, :d] = H
    K[:d, d:] = MA.T
    K[d:, :d] = MA
    rhs = np.vstack([rhs_top, rhs_bottom])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(K, check_finite=True)
    except ValueError as exc:
        raise SingularKkt(str(exc)) from None
    diag = np.abs(np.diag(lu))
    if diag.min(initial=np.inf) <= 1e-13 * max(diag.max(initial=0.0), 1.0):
        raise SingularKkt("reduced KKT matrix is singular")
    x = sla.lu_solve((lu, piv), rhs)
    return x[:d], x[d:]


def polish(p, z, s, y, st):
    """Solve the equality-constrained QP on the guessed active set.

    The guess is corrected with primal-dual active-set steps: constraints
    with a wrong-signed multiplier are released and violated constraints
    are added, until the point satisfies all KKT conditions.
    Returns ``None`` when no KKT point is found.
    """
    lb, ub = p.lb.ravel(), p.ub.ravel()
    zs, ys = (p.M @ z).ravel(), y.ravel()
    fin_lo, fin_up = ~is_infinite(lb), ~is_infinite(ub)
    eq = fin_lo & fin_up & (np.abs(ub - lb) < 1e-12)
    lower = fin_lo & ((zs - lb) < -ys)
    upper = fin_up & ((ub - zs) < ys) & ~lower
    lower |= eq & ~upper
    tol_p = st.eps_abs
    for _ in range(st.polish_refine_iter):
        act = np.flatnonzero(lower | upper)
        bnd = np.where(upper, ub, lb)[act].reshape(-1, 1)
        try:
            zp, ya = solve_reduced_kkt(p.H, p.M[act], -p.q, bnd)
        except SingularKkt:
            return None
        yp = np.zeros(lb.shape)
        yp[act] = ya.ravel()
        sp = (p.M @ zp).ravel()
        scale = 1.0 + np.max(np.abs(sp), initial=0.0)
        wrong_up = upper & ~eq & (yp < 0)
        wrong_lo = lower & ~eq & (yp > 0)
        viol_up = fin_up & ~upper & (sp > ub + tol_p * scale)
        viol_lo = fin_lo & ~lower & (sp < lb - tol_p * scale)
        if not (wrong_up.any() or wrong_lo.any() or viol_up.any() or viol_lo.any()):
            break
        # release wrong-signed multipliers first; add violations otherwise
        if wrong_up.any() or wrong_lo.any():
            upper &= ~wrong_up
            lower &= ~wrong_lo
        else:
            upper |= viol_up
            lower |= viol_lo & ~upper
    else:
        return None
    # eq rows carry a two-sided bound; classify them by the multiplier sign
    sp_col = sp.reshape(-1, 1)
    s_proj = _project(sp_col, p)
    zp_col, yp_col = zp.reshape(-1, 1), yp.reshape(-1, 1)
    prim, dual, ps, ds = _residuals(p, zp_col, s_proj, yp_col)
    if not _converged(st, prim, dual, ps, ds):
        return None
    upper_set, lower_set = classify_active(
        QpSolution(zp_col, yp_col, sp_col, (), (), 0, 0, SOLVED), st.active_threshold)
    return QpSolution(zp_col, yp_col, sp_col, upper_set, lower_set, prim, dual,
                      SOLVED, 0, True, p.objective(zp_col))


def qp_differentiate(p, sol, dL_dz, threshold=C.QP_ACTIVE):
    """Gradients of a loss ``L(z*)`` with respect to ``(H, q, M, lb, ub)``.

    Uses the KKT system restricted to strongly active constraints. With
    ``[dz; dy]`` solving ``KKT [dz; dy] = [-dL/dz; 0]``::

        dL/dq = dz
        dL/dH = (dz z' + z dz') / 2
        dL/dM_i = y_i dz' + dy_i z'    for active rows i
        dL/d(bound_i) = -dy_i          (upper bound for i in U, lower for i in L)

    Weakly active constraints are treated as inactive, so at a point where
    the active set changes this is a one-sided derivative.
    """
    if sol.status != SOLVED:
        raise SingularKkt(f"cannot differentiate a QP with status {sol.status!r}")
    g = np.asarray(dL_dz, dtype=float).reshape(-1, 1)
    d, c = p.dims
    upper, lower = classify_active(sol, threshold)
    act = np.array(upper + lower, dtype=int)
    dz, dy_act = solve_reduced_kkt(p.H, p.M[act], -g, np.zeros((act.size, 1)))
    z, y = sol.z, sol.y
    dy = np.zeros((c, 1))
    dy[act] = dy_act

    dL_dq = dz
    dL_dH = 0.5 * (dz @ z.T + z @ dz.T)
    dL_dM = np.zeros((c, d))
    dL_dM[act] = y[act] @ dz.T + dy[act] @ z.T
    dL_dub = np.zeros((c, 1))
    dL_dlb = np.zeros((c, 1))
    up, lo = np.array(upper, dtype=int), np.array(lower, dtype=int)
    dL_dub[up] = -dy[up]
    dL_dlb[lo] = -dy[lo]
    return dL_dH, dL_dq, dL_dM, dL_dlb, dL_dub


class _QpContext:
    def __init__(self, problem, solution, threshold):
        self.problem, self.solution, self.threshold = problem, solution, threshold
        # when set, a singular KKT system zeroes this sample's adjoints instead of raising
        self.skip_singular = False
        self.sample = None
        self.failures = None


def _qp_rule(ctx, parent_values, adjoint):
    try:
        return list(qp_differentiate(ctx.problem, ctx.solution, adjoint, ctx.threshold))
    except SingularKkt as exc:
        if not ctx.skip_singular:
            raise
        if ctx.failures is not None:
            ctx.failures.append((ctx.sample, str(exc)))
        return [np.zeros_like(v) for v in parent_values]


register_rule("qp", _qp_rule)


def qp_custom_node(tape, H, q, M, lb, ub, settings=None):
    """Record a QP solve on ``tape``; returns ``(z_node, solution)``."""
    st = settings or QpSettings()
    problem = QpProblem(H.value, q.value, M.value, lb.value, ub.value)
    sol = qp_solve(problem, st)
    node = tape.custom("qp", (H, q, M, lb, ub), sol.z, _QpContext(problem, sol, st.active_threshold))
    return node, sol
