"""Finite-difference checks for the DARE, QP and end-to-end derivatives."""
from dataclasses import replace

import numpy as np

from . import constants as C
from .learn import loss_and_grad, spec_with
from .mpc import MpcSpec, LtiSystem, simulate_closed_loop, infinite_horizon
from .qp import QpProblem, qp_differentiate, qp_solve
from .riccati import dare_jacobians, gain_jacobians, solve_dare

FD_STEP = 1e-6
QP_FD_STEP = 1e-5
MUTATIONS = ("z2-sign",)


def rel_err(analytic, numeric, floor=1e-8):
    a, b = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def _sym_dirs(n):
    """Symmetric unit perturbations ``E_ij + E_ji`` (``E_ii`` on the diagonal)."""
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = 1.0
            yield E


def _fd_matrix(f, X, h, symmetric=False):
    """Central differences of ``vec f`` along every entry (or symmetric pair) of ``X``."""
    dirs = list(_sym_dirs(X.shape[0])) if symmetric else []
    if not symmetric:
        for k in range(X.size):
            E = np.zeros(X.size)
            E[k] = 1.0
            dirs.append(E.reshape(X.shape, order="F"))
    cols = [(np.ravel(f(X + h * E), order="F") - np.ravel(f(X - h * E), order="F")) / (2 * h)
            for E in dirs]
    return np.column_stack(cols), dirs


def _project_jac(J, dirs):
    """Analytic Jacobian applied to the same perturbation directions."""
    return np.column_stack([J @ np.ravel(E, order="F") for E in dirs])


def random_system(rng, n=None, m=None):
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 3))
    A = rng.normal(size=(n, n)) / np.sqrt(n) * rng.uniform(0.6, 1.4)
    B = rng.normal(size=(n, m))
    Cq = rng.normal(size=(n, n))
    Dr = rng.normal(size=(m, m))
    return A, B, Cq @ Cq.T + 0.1 * np.eye(n), Dr @ Dr.T + 0.5 * np.eye(m)


def dare_check(A, B, Q, R, h=FD_STEP, mutate=None):
    """Relative errors of dP/d{A,B,Q,R} and dK/d{A,B,Q,R} against central differences."""
    sol = solve_dare(A, B, Q, R)
    jac = dare_jacobians(sol, A, B, Q, R)
    if mutate == "z2-sign":
        jac = replace(jac, dP_dA=-jac.dP_dA)
    elif mutate is not None:
        raise ValueError(f"unknown mutation {mutate!r}")
    gjac = gain_jacobians(sol, A, B, Q, R, jac)
    args = {"A": A, "B": B, "Q": Q, "R": R}
    out = {}
    for k, name in enumerate("ABQR"):
        sym = name in "QR"

        def run(X, name=name):
            sol_x = solve_dare(**dict(args, **{name: X}))
            return np.concatenate([np.ravel(sol_x.P, order="F"), np.ravel(sol_x.K, order="F")])

        fd, dirs = _fd_matrix(run, args[name], h, symmetric=sym)
        nP = A.shape[0] ** 2
        jP = [jac.dP_dA, jac.dP_dB, jac.dP_dQ, jac.dP_dR][k]
        out[f"dP/d{name}"] = rel_err(_project_jac(jP, dirs), fd[:nP])
        out[f"dK/d{name}"] = rel_err(_project_jac(gjac[k], dirs), fd[nP:])
    return out


def random_qp(rng, d=None, c=None, margin=0.5):
    """Strictly convex QP with a known solution, strictly complementary active set.

    Returns ``(problem, z_star, y_star)``.
    """
    d = d or int(rng.integers(2, 11))
    c = c or int(rng.integers(1, 13))
    L = rng.normal(size=(d, d))
    H = L @ L.T + 0.5 * np.eye(d)
    M = rng.normal(size=(c, d))
    z = rng.normal(size=(d, 1))
    Mz = (M @ z).ravel()
    # fewer active rows than variables, otherwise z* sits at a vertex and dz/dq == 0
    n_act = int(rng.integers(0, min(c, d - 1) + 1))
    act = rng.permutation(c)[:n_act]
    lb, ub, y = np.empty(c), np.empty(c), np.zeros((c, 1))
    for i in range(c):
        gap_lo, gap_hi = rng.uniform(margin, 2.0, size=2)
        lb[i], ub[i] = Mz[i] - gap_lo, Mz[i] + gap_hi
        if rng.random() < 0.2:
            lb[i] = -C.INF
        elif rng.random() < 0.2:
            ub[i] = C.INF
        if i in act:
            if rng.random() < 0.5:
                ub[i] = Mz[i]
                y[i] = rng.uniform(margin, 2.0)
            else:
                lb[i] = Mz[i]
                y[i] = -rng.uniform(margin, 2.0)
    q = -H @ z - M.T @ y
    return QpProblem(H, q, M, lb, ub), z, y


def qp_check(problem, w, h=QP_FD_STEP, settings=None):
    """Relative errors of the five QP gradients of ``L = w'z*`` against central differences."""
    sol = qp_solve(problem, settings)
    grads = qp_differentiate(problem, sol, w)
    w = np.reshape(w, (-1, 1))

    def loss(**kw):
        return (w.T @ qp_solve(replace(problem, **kw), settings).z).item()

    out = {}
    # H stays symmetric: perturb entry pairs
    dirs = list(_sym_dirs(problem.H.shape[0]))
    fd = [(loss(H=problem.H + h * E) - loss(H=problem.H - h * E)) / (2 * h) for E in dirs]
    out["H"] = rel_err([np.sum(grads[0] * E) for E in dirs], fd)
    for k, name in ((1, "q"), (2, "M"), (3, "lb"), (4, "ub")):
        X = getattr(problem, name)
        an, fd = [], []
        for idx in np.ndindex(X.shape):
            if abs(X[idx]) >= C.INF_THRESHOLD:
                continue
            E = np.zeros_like(X)
            E[idx] = h
            fd.append((loss(**{name: X + E}) - loss(**{name: X - E})) / (2 * h))
            an.append(grads[k][idx])
        out[name] = rel_err(an, fd) if fd else 0.0
    return out


def scalar_learning_setup():
    """Scalar expert with both input bounds and the state bound active, plus a perturbed learner."""
    sys = LtiSystem([[1.2]], [[1.0]], 1.0)
    expert = MpcSpec(sys, [[1.0]], [[1.0]], [[1.0]], 2, x_lb=[-4.0], x_ub=[2.5],
                     u_lb=[-1.5], u_ub=[1.0], ku=100.0, kx=100.0)
    expert = infinite_horizon(expert, N=2)
    traj = simulate_closed_loop(expert, [3.0], 3)
    learner = spec_with(expert, {"A": np.array([[1.1]]), "B": np.array([[0.9]]),
                                 "Q": np.array([[1.3]]), "R": np.array([[0.8]])})
    return learner, traj


def end_to_end_check(spec, batch, N, beta, names, h=FD_STEP):
    """Relative errors of d(loss)/d(param) for every finite scalar in ``names``."""
    res = loss_and_grad(spec, batch, N, beta, names)
    values = spec.values()
    out = {}
    for name in names:
        X = values[name]
        an, fd = [], []
        for idx in np.ndindex(X.shape):
            if abs(X[idx]) >= C.INF_THRESHOLD:
                continue
            E = np.zeros_like(X)
            E[idx] = h
            if name in ("Q", "R") and idx[0] != idx[1]:
                E = E + E.T
            lp = loss_and_grad(spec_with(spec, {name: X + E}), batch, N, beta).loss
            lm = loss_and_grad(spec_with(spec, {name: X - E}), batch, N, beta).loss
            fd.append((lp - lm) / (2 * h))
            an.append(np.sum(res.grads[name] * E) / h)
        out[name] = rel_err(an, fd)
    return out


def run_all(seed=0, systems=5, qps=5, mutate=None):
    """Compact suite used by the command line: worst error per group."""
    rng = np.random.default_rng(seed)
    dare = 0.0
    for _ in range(systems):
        dare = max(dare, max(dare_check(*random_system(rng), mutate=mutate).values()))
    qp = 0.0
    for _ in range(qps):
        problem, _, _ = random_qp(rng)
        qp = max(qp, max(qp_check(problem, rng.normal(size=problem.dims[0])).values()))
    spec, traj = scalar_learning_setup()
    names = ("A", "B", "Q", "R", "x_lb", "x_ub", "u_lb", "u_ub")
    e2e = max(end_to_end_check(spec, [traj], 2, 0.5, names).values())
    return {"dare": dare, "qp": qp, "end_to_end": e2e}


TOLERANCES = {"dare": 1e-5, "qp": 1e-5, "end_to_end": 1e-4}
