"""Discrete-time algebraic Riccati equation: solution, LQR gain and derivatives.

The solver uses the structured doubling algorithm; the derivative of the
stabilizing solution P with respect to (A, B, Q, R) is obtained by
implicit differentiation of ``P = A' M1 A + Q`` with
``M1 = P - P B M2 B' P``, ``M2 = M3^-1`` and ``M3 = R + B' P B``.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import constants as C
from .errors import IllConditioned, NoStabilizingSolution, Z1Singular
from .graph import register_rule
from .linalg import (
    SingularMatrixError, commutation_matrix, is_symmetric, solve,
    spectral_radius, symmetrize, unvec, vec,
)


@dataclass(frozen=True)
class DareSolution:
    P: np.ndarray
    K: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    M3: np.ndarray
    residual_norm: float
    closed_loop_radius: float
    iterations: int = 0
    method: str = "doubling"


@dataclass(frozen=True)
class DareJacobians:
    dP_dA: np.ndarray
    dP_dB: np.ndarray
    dP_dQ: np.ndarray
    dP_dR: np.ndarray
    Z: tuple = field(repr=False, default=())


def _check_inputs(A, B, Q, R):
    A, B, Q, R = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (A, B, Q, R))
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise ValueError(
            f"dimension mismatch: A{A.shape} B{B.shape} Q{Q.shape} R{R.shape}")
    for name, X in (("A", A), ("B", B), ("Q", Q), ("R", R)):
        if not np.isfinite(X).all():
            raise ValueError(f"{name} has non-finite entries")
    if not is_symmetric(Q):
        raise ValueError("Q is not symmetric")
    if not is_symmetric(R):
        raise ValueError("R is not symmetric")
    Q, R = symmetrize(Q), symmetrize(R)
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise ValueError("R is not positive definite") from None
    return A, B, Q, R


def dare_residual(A, B, Q, R, P):
    """Frobenius norm of ``A'PA - A'PB (R + B'PB)^-1 B'PA + Q - P``."""
    M3 = R + B.T @ P @ B
    rhs = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(M3, B.T @ P @ A) + Q
    return float(np.linalg.norm(rhs - P))


def _doubling(A, B, Q, R, tol, max_iter):
    n = A.shape[0]
    I = np.eye(n)
    Ak = A.copy()
    Gk = symmetrize(B @ np.linalg.solve(R, B.T))
    Hk = Q.copy()
    for it in range(1, max_iter + 1):
        W = I + Gk @ Hk
        try:
            WA = solve(W, np.hstack([Ak, Gk]))
        except (SingularMatrixError, ValueError):
            return None, it
        WiA, WiG = WA[:, :n], WA[:, n:]
        H_next = symmetrize(Hk + Ak.T @ Hk @ WiA)
        Gk = symmetrize(Gk + Ak @ WiG @ Ak.T)
        Ak = Ak @ WiA
        if not np.isfinite(H_next).all():
            return None, it
        step = np.linalg.norm(H_next - Hk)
        Hk = H_next
        if step <= tol * (1.0 + np.linalg.norm(Hk)):
            return Hk, it
    return None, max_iter


def _fixed_point(A, B, Q, R, tol, max_iter=100000, damping=0.5):
    P = Q.copy()
    for it in range(1, max_iter + 1):
        M3 = R + B.T @ P @ B
        F = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(M3, B.T @ P @ A) + Q
        P_next = symmetrize((1 - damping) * P + damping * F)
        if not np.isfinite(P_next).all():
            return None, it
        if np.linalg.norm(P_next - P) <= tol * (1.0 + np.linalg.norm(P_next)):
            return P_next, it
        P = P_next
    return None, max_iter


def _newton_polish(A, B, Q, R, P, steps=2):
    """Kleinman-Hewer refinement: each step solves one Stein equation."""
    for _ in range(steps):
        M3 = R + B.T @ P @ B
        K = -np.linalg.solve(M3, B.T @ P @ A)
        Acl = A + B @ K
        if spectral_radius(Acl) >= 1.0:
            return P
        P_new = symmetrize(sla.solve_discrete_lyapunov(Acl.T, Q + K.T @ R @ K))
        if dare_residual(A, B, Q, R, P_new) > dare_residual(A, B, Q, R, P):
            return P
        P = P_new
    return P


def solve_dare(A, B, Q, R, tol=C.DARE_STEP_TOL, max_doublings=C.DARE_MAX_DOUBLINGS):
    """Stabilizing solution of the DARE and the LQR gain ``K = -(R + B'PB)^-1 B'PA``."""
    A, B, Q, R = _check_inputs(A, B, Q, R)
    P, iters = _doubling(A, B, Q, R, tol, max_doublings)
    method = "doubling"
    if P is None:
        P, iters = _fixed_point(A, B, Q, R, tol)
        method = "fixed-point"
        if P is None:
            raise NoStabilizingSolution(
                "doubling and fixed-point iterations both failed to converge")
    P = _newton_polish(A, B, Q, R, P)
    return _finish(A, B, Q, R, P, iters, method)


def _finish(A, B, Q, R, P, iters, method):
    P = symmetrize(P)
    M3 = symmetrize(R + B.T @ P @ B)
    try:
        cho = sla.cho_factor(M3)
    except np.linalg.LinAlgError:
        raise IllConditioned("R + B'PB is not positive definite") from None
    M2 = symmetrize(sla.cho_solve(cho, np.eye(M3.shape[0])))
    K = -sla.cho_solve(cho, B.T @ P @ A)
    M1 = symmetrize(P - P @ B @ M2 @ B.T @ P)
    rho = spectral_radius(A + B @ K)
    if rho >= 1.0 - C.STABILITY_MARGIN:
        raise NoStabilizingSolution(f"closed loop spectral radius {rho:.12g} is not below 1")
    res = dare_residual(A, B, Q, R, P)
    if res > C.DARE_RESIDUAL * (1.0 + np.linalg.norm(P)):
        raise NoStabilizingSolution(f"DARE residual {res:.3e} too large")
    return DareSolution(P, K, M1, M2, M3, res, rho, iters, method)


def dare_jacobians(sol, A, B, Q, R):
    """Jacobians of ``vec P`` with respect to ``vec A, vec B, vec Q, vec R``."""
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    n, m = B.shape
    P, M1, M2 = sol.P, sol.M1, sol.M2
    In, Im = np.eye(n), np.eye(m)
    In2, Im2 = np.eye(n * n), np.eye(m * m)
    Vnn, Vmm = commutation_matrix(n, n), commutation_matrix(m, m)

    PB = P @ B
    PBM2Bt = PB @ M2 @ B.T
    AtAt = np.kron(A.T, A.T)
    PBPB_M2M2 = np.kron(PB, PB) @ np.kron(M2, M2)

    Z1 = In2 - AtAt @ (
        In2 - np.kron(PBM2Bt, In) - np.kron(In, PBM2Bt) + PBPB_M2M2 @ np.kron(B.T, B.T))
    Z2 = (Vnn + In2) @ np.kron(In, A.T @ M1)
    Z3 = AtAt @ (
        PBPB_M2M2 @ (Im2 + Vmm) @ np.kron(Im, B.T @ P)
        - (In2 + Vnn) @ np.kron(PB @ M2, P))
    Z4 = In2
    Z5 = AtAt @ PBPB_M2M2

    try:
        J = solve(Z1, np.hstack([Z2, Z3, Z4, Z5]), max_cond=C.Z1_MAX_COND)
    except SingularMatrixError as exc:
        raise Z1Singular(str(exc)) from None
    cuts = np.cumsum([n * n, n * m, n * n])
    dA, dB, dQ, dR = np.split(J, cuts, axis=1)
    return DareJacobians(dA, dB, dQ, dR, (Z1, Z2, Z3, Z4, Z5))


def gain_jacobians(sol, A, B, Q, R, jac=None):
    """Jacobians of ``vec K`` for ``K = -M2 B'PA``, chained through ``vec P``."""
    if jac is None:
        jac = dare_jacobians(sol, A, B, Q, R)
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    n, m = B.shape
    P, M2 = sol.P, sol.M2
    Im = np.eye(m)
    Vmm, Vnm = commutation_matrix(m, m), commutation_matrix(n, m)

    # dK = L dM3 - (A'P (x) M2) V dB - (A' (x) M2 B') dP - (I (x) M2 B'P) dA
    L = np.kron(A.T @ P @ B, Im) @ np.kron(M2, M2)
    dM3_dB = (np.eye(m * m) + Vmm) @ np.kron(Im, B.T @ P)
    coef_P = L @ np.kron(B.T, B.T) - np.kron(A.T, M2 @ B.T)

    dK_dA = coef_P @ jac.dP_dA - np.kron(np.eye(n), M2 @ B.T @ P)
    dK_dB = coef_P @ jac.dP_dB + L @ dM3_dB - np.kron(A.T @ P, M2) @ Vnm
    dK_dQ = coef_P @ jac.dP_dQ
    dK_dR = coef_P @ jac.dP_dR + L
    return dK_dA, dK_dB, dK_dQ, dK_dR


# --- tape integration -------------------------------------------------------

class _DareContext:
    def __init__(self, sol, A, B, Q, R):
        self.sol, self.A, self.B, self.Q, self.R = sol, A, B, Q, R
        self._jac = None
        self._gjac = None

    @property
    def jac(self):
        if self._jac is None:
            self._jac = dare_jacobians(self.sol, self.A, self.B, self.Q, self.R)
        return self._jac

    @property
    def gjac(self):
        if self._gjac is None:
            self._gjac = gain_jacobians(self.sol, self.A, self.B, self.Q, self.R, self.jac)
        return self._gjac


def _pullback(jacobians, adjoint, shapes):
    g = vec(adjoint)
    return [unvec(J.T @ g, *shape) for J, shape in zip(jacobians, shapes)]


def _shapes(ctx):
    n, m = ctx.B.shape
    return [(n, n), (n, m), (n, n), (m, m)]


def _p_rule(ctx, parent_values, adjoint):
    j = ctx.jac
    return _pullback([j.dP_dA, j.dP_dB, j.dP_dQ, j.dP_dR], adjoint, _shapes(ctx))


def _k_rule(ctx, parent_values, adjoint):
    return _pullback(ctx.gjac, adjoint, _shapes(ctx))


register_rule("dare.P", _p_rule)
register_rule("dare.K", _k_rule)


def dare_custom_node(tape, A, B, Q, R):
    """Record the DARE solve on ``tape``; returns ``(P_node, K_node, solution)``."""
    sol = solve_dare(A.value, B.value, Q.value, R.value)
    ctx = _DareContext(sol, A.value, B.value, symmetrize(Q.value), symmetrize(R.value))
    parents = (A, B, Q, R)
    P_node = tape.custom("dare.P", parents, sol.P, ctx)
    K_node = tape.custom("dare.K", parents, sol.K, ctx)
    return P_node, K_node, sol
