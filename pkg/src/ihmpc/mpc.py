"""Condensed linear-quadratic MPC with soft state/input constraints.

Decision vector ``z = (u or du, r, s)`` with ``N*m + N*m + N*n`` entries:
predicted inputs (or perturbations of the pre-stabilizing feedback),
input-constraint slacks ``r_0..r_{N-1}`` and state-constraint slacks
``s_1..s_N``. Constraint rows, in order::

    [G  I  0]  >= u_lb - shift        (upper side open)
    [G -I  0]  <= u_ub - shift        (lower side open)
    [0  I  0]  >= 0
    [Psi 0  I] >= x_lb - Phi x        (upper side open)
    [Psi 0 -I] <= x_ub - Phi x        (lower side open)
    [0  0  I]  >= 0

with ``G = I`` and ``shift = 0`` in the standard form, and
``G = Kbig Psi_hat + I``, ``shift = Kbig Phi_hat x`` in the pre-stabilized
form. Every matrix is built on a :class:`~ihmpc.graph.Tape` so the same code
serves simulation and learning.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import constants as C
from .errors import NumericalError
from .graph import Tape, register_rule
from .linalg import as_matrix, bound_vector, is_infinite, spectral_radius
from .qp import QpProblem, QpSettings, qp_custom_node, qp_solve
from .riccati import solve_dare

STANDARD = "standard"
PRESTABILIZED = "prestabilized"

PARAM_NAMES = ("A", "B", "Q", "R", "QN", "K", "x_lb", "x_ub", "u_lb", "u_ub", "ku", "kx")


@dataclass(frozen=True)
class LtiSystem:
    A: np.ndarray
    B: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        A, B = as_matrix(self.A), as_matrix(self.B)
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f"inconsistent system shapes A{A.shape} B{B.shape}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def step(self, x, u):
        return self.A @ np.reshape(x, (-1, 1)) + self.B @ np.reshape(u, (-1, 1))


@dataclass(frozen=True)
class MpcSpec:
    system: LtiSystem
    Q: np.ndarray
    R: np.ndarray
    QN: np.ndarray
    N: int
    x_lb: np.ndarray
    x_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    ku: float = 100.0
    kx: float = 100.0
    K: np.ndarray = None
    form: str = STANDARD

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        Q, R, QN = as_matrix(self.Q), as_matrix(self.R), as_matrix(self.QN)
        if Q.shape != (n, n) or QN.shape != (n, n) or R.shape != (m, m):
            raise ValueError("cost matrix dimensions do not match the system")
        bounds = {k: bound_vector(getattr(self, k)) for k in ("x_lb", "x_ub", "u_lb", "u_ub")}
        for k, size in (("x_lb", n), ("x_ub", n), ("u_lb", m), ("u_ub", m)):
            if bounds[k].shape != (size, 1):
                raise ValueError(f"{k} must have {size} entries")
        if np.any(bounds["x_lb"] > bounds["x_ub"]) or np.any(bounds["u_lb"] > bounds["u_ub"]):
            raise ValueError("lower bound above upper bound")
        if np.any(bounds["u_lb"] > 0) or np.any(bounds["u_ub"] < 0):
            raise ValueError("input bounds must satisfy u_lb <= 0 <= u_ub")
        if int(self.N) < 1:
            raise ValueError("horizon N must be >= 1")
        if self.ku <= 0 or self.kx <= 0:
            raise ValueError("penalty weights must be positive")
        if self.form not in (STANDARD, PRESTABILIZED):
            raise ValueError(f"unknown form {self.form!r}")
        K = None if self.K is None else as_matrix(self.K)
        if K is not None and K.shape != (m, n):
            raise ValueError(f"K must have shape {(m, n)}")
        if self.form == PRESTABILIZED:
            if K is None:
                raise ValueError("pre-stabilized form needs a feedback gain K")
            if spectral_radius(self.system.A + self.system.B @ K) >= 1.0:
                raise ValueError("K does not stabilize (A, B)")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "QN", QN)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "N", int(self.N))
        for k, v in bounds.items():
            object.__setattr__(self, k, v)

    @property
    def n(self):
        return self.system.n

    @property
    def m(self):
        return self.system.m

    def values(self):
        """Parameter values keyed as in :data:`PARAM_NAMES`."""
        out = {
            "A": self.system.A, "B": self.system.B, "Q": self.Q, "R": self.R,
            "QN": self.QN, "x_lb": self.x_lb, "x_ub": self.x_ub,
            "u_lb": self.u_lb, "u_ub": self.u_ub,
            "ku": np.array([[self.ku]]), "kx": np.array([[self.kx]]),
        }
        out["K"] = self.K if self.K is not None else np.zeros((self.m, self.n))
        return out


def infinite_horizon(spec, N=None, form=PRESTABILIZED):
    """Copy of ``spec`` with terminal cost and feedback gain taken from the DARE."""
    sys = spec.system
    sol = solve_dare(sys.A, sys.B, spec.Q, spec.R)
    return replace(spec, QN=sol.P, K=sol.K, form=form, N=spec.N if N is None else N)


# --- assembly on a tape -------------------------------------------------------

@dataclass
class CondensedMatrices:
    """State-independent part of the condensed problem (tape nodes)."""
    N: int
    n: int
    m: int
    form: str
    H: object
    M: object
    Phi: object
    Psi: object
    Phi_hat: object
    Kbig: object
    G: object
    Rbig: object
    Qbig: object
    u_lb: object
    u_ub: object
    x_lb: object
    x_ub: object
    penalty: object
    const: dict = field(default_factory=dict)

    @property
    def layout(self):
        Nm, Nn = self.N * self.m, self.N * self.n
        return {"u": (0, Nm), "r": (Nm, 2 * Nm), "s": (2 * Nm, 2 * Nm + Nn)}

    @property
    def dim(self):
        return 2 * self.N * self.m + self.N * self.n


def spec_nodes(tape, spec, learnable=()):
    """Tape leaves for every MPC parameter; names in ``learnable`` become params."""
    unknown = set(learnable) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)}")
    return {k: tape.input(v, requires_grad=k in learnable, name=k)
            for k, v in spec.values().items()}


def _block_diag(tape, blocks, size):
    N = len(blocks)
    grid = [[blocks[i] if i == j else None for j in range(N)] for i in range(N)]
    return tape.concat(grid, row_sizes=[size] * N, col_sizes=[size] * N) if N > 1 else blocks[0]


def _toeplitz(tape, column, N, n, m):
    """Block lower-triangular matrix whose block (i, j) is ``column`` block i - j."""
    blocks = []
    for j in range(N):
        shift = np.kron(np.eye(N, k=-j), np.eye(n))
        place = np.kron(np.eye(N)[j:j + 1], np.eye(m))
        term = tape.const(shift) @ column @ tape.const(place)
        blocks.append(term)
    out = blocks[0]
    for b in blocks[1:]:
        out = out + b
    return out


def condensed_matrices(tape, p, N, form):
    """Assemble ``H`` and ``M`` from the parameter nodes ``p``."""
    n, m = p["B"].shape
    Nm, Nn = N * m, N * n
    In, INm = tape.const(np.eye(n)), tape.const(np.eye(Nm))
    if form == PRESTABILIZED:
        Acl = p["A"] + p["B"] @ p["K"]
    else:
        Acl = p["A"]
    Phi = tape.power_chain(Acl, In, N, start=1)
    Psi = _toeplitz(tape, tape.power_chain(Acl, p["B"], N, start=0), N, n, m)
    Rbig = _block_diag(tape, [p["R"]] * N, m)
    Qbig = _block_diag(tape, [p["Q"]] * (N - 1) + [p["QN"]], n)
    Phi_hat = tape.vstack([In, Phi])
    QPsi = Qbig @ Psi
    if form == PRESTABILIZED:
        Kbig = tape.concat(
            [[p["K"] if i == j else None for j in range(N + 1)] for i in range(N)],
            row_sizes=[m] * N, col_sizes=[n] * (N + 1))
        Psi_hat = tape.concat([[None], [Psi]], row_sizes=[n, Nn], col_sizes=[Nm])
        G = Kbig @ Psi_hat + INm
        Hu = G.T @ Rbig @ G + Psi.T @ QPsi
    else:
        Kbig = None
        G = INm
        Hu = Rbig + Psi.T @ QPsi
    # symmetrize against roundoff in the products
    Hu = tape.scale(Hu + Hu.T, 0.5)
    H = tape.concat([[Hu, None, None], [None, None, None], [None, None, None]],
                    row_sizes=[Nm, Nm, Nn], col_sizes=[Nm, Nm, Nn])
    I_m, I_n = INm, tape.const(np.eye(Nn))
    neg_m, neg_n = tape.const(-np.eye(Nm)), tape.const(-np.eye(Nn))
    M = tape.concat(
        [[G, I_m, None],
         [G, neg_m, None],
         [None, I_m, None],
         [Psi, None, I_n],
         [Psi, None, neg_n],
         [None, None, I_n]],
        row_sizes=[Nm, Nm, Nm, Nn, Nn, Nn], col_sizes=[Nm, Nm, Nn])
    rep_m = tape.const(np.kron(np.ones((N, 1)), np.eye(m)))
    rep_n = tape.const(np.kron(np.ones((N, 1)), np.eye(n)))
    penalty = tape.vstack([tape.const(np.ones((Nm, 1))) @ p["ku"],
                           tape.const(np.ones((Nn, 1))) @ p["kx"]])
    return CondensedMatrices(
        N, n, m, form, H, M, Phi, Psi, Phi_hat, Kbig, G, Rbig, Qbig,
        rep_m @ p["u_lb"], rep_m @ p["u_ub"], rep_n @ p["x_lb"], rep_n @ p["x_ub"],
        penalty,
        {"inf_m": tape.const(np.full((Nm, 1), C.INF)),
         "inf_n": tape.const(np.full((Nn, 1), C.INF)),
         "ninf_m": tape.const(np.full((Nm, 1), -C.INF)),
         "ninf_n": tape.const(np.full((Nn, 1), -C.INF)),
         "zero_m": tape.const(np.zeros((Nm, 1))),
         "zero_n": tape.const(np.zeros((Nn, 1)))},
    )


def condensed_vectors(tape, mats, x):
    """State-dependent ``q``, ``lb``, ``ub`` for the current state node ``x``."""
    c = mats.const
    Phix = mats.Phi @ x
    qu = mats.Psi.T @ (mats.Qbig @ Phix)
    u_lb, u_ub = mats.u_lb, mats.u_ub
    if mats.form == PRESTABILIZED:
        shift = mats.Kbig @ (mats.Phi_hat @ x)
        qu = qu + mats.G.T @ (mats.Rbig @ shift)
        u_lb, u_ub = u_lb - shift, u_ub - shift
    q = tape.vstack([qu, mats.penalty])
    lb = tape.vstack([u_lb, c["ninf_m"], c["zero_m"], mats.x_lb - Phix, c["ninf_n"], c["zero_n"]])
    ub = tape.vstack([c["inf_m"], u_ub, c["inf_m"], c["inf_n"], mats.x_ub - Phix, c["inf_n"]])
    return q, lb, ub


def _clean_bounds(v):
    # subtracting finite shifts from a sentinel must not turn it into a finite bound
    out = v.copy()
    out[is_infinite(v)] = np.sign(v[is_infinite(v)]) * C.INF
    return out


register_rule("bounds", lambda ctx, parents, adjoint: [adjoint])


def predicted_controls(tape, mats, x, z):
    """Full predicted input sequence (stacked ``N*m x 1``) from the QP solution node."""
    Nm = mats.N * mats.m
    select = np.zeros((Nm, mats.dim))
    select[:, :Nm] = np.eye(Nm)
    du = tape.const(select) @ z
    if mats.form == PRESTABILIZED:
        return mats.Kbig @ (mats.Phi_hat @ x) + mats.G @ du, du
    return du, du


@dataclass(frozen=True)
class CondensedQp:
    problem: QpProblem
    layout: dict
    Phi: np.ndarray
    Psi: np.ndarray
    Phi_hat: np.ndarray = None
    Psi_hat: np.ndarray = None
    Kbig: np.ndarray = None


def _assemble(spec, x_t, form):
    tape = Tape()
    p = spec_nodes(tape, spec)
    mats = condensed_matrices(tape, p, spec.N, form)
    q, lb, ub = condensed_vectors(tape, mats, tape.const(np.reshape(x_t, (-1, 1))))
    problem = QpProblem(mats.H.value, q.value, mats.M.value,
                        _clean_bounds(lb.value), _clean_bounds(ub.value))
    Psi_hat = None
    if form == PRESTABILIZED:
        Psi_hat = np.vstack([np.zeros((spec.n, spec.N * spec.m)), mats.Psi.value])
    return CondensedQp(
        problem, mats.layout, mats.Phi.value, mats.Psi.value,
        mats.Phi_hat.value if form == PRESTABILIZED else None, Psi_hat,
        mats.Kbig.value if mats.Kbig is not None else None)


def assemble_standard(spec, x_t):
    if spec.form != STANDARD:
        raise ValueError("spec is not in standard form")
    return _assemble(spec, x_t, STANDARD)


def assemble_prestabilized(spec, x_t):
    if spec.K is None:
        raise ValueError("pre-stabilized assembly needs a feedback gain K")
    return _assemble(spec, x_t, PRESTABILIZED)


# --- closed loop --------------------------------------------------------------

@dataclass(frozen=True)
class StepResult:
    u: np.ndarray                 # applied input, m x 1
    controls: np.ndarray          # predicted inputs, N x m
    perturbations: np.ndarray     # du (equal to controls in standard form), N x m
    states: np.ndarray            # predicted states x_0..x_N, (N+1) x n
    max_input_slack: float
    max_state_slack: float
    solution: object = None


class MpcController:
    """Receding-horizon controller; the state-independent matrices are built once."""

    def __init__(self, spec, settings=None):
        self.spec = spec
        self.settings = settings or QpSettings()
        self._tape = Tape()
        p = spec_nodes(self._tape, spec)
        self._mats = condensed_matrices(self._tape, p, spec.N, spec.form)
        self._H = self._mats.H.value
        self._M = self._mats.M.value
        self._n_static = len(self._tape.nodes)

    def step(self, x):
        spec, mats, tape = self.spec, self._mats, self._tape
        xn = tape.const(np.reshape(x, (-1, 1)))
        q, lb, ub = condensed_vectors(tape, mats, xn)
        problem = QpProblem(self._H, q.value, self._M, _clean_bounds(lb.value), _clean_bounds(ub.value))
        sol = qp_solve(problem, self.settings)
        N, n, m = spec.N, spec.n, spec.m
        z = sol.z
        du = z[:N * m]
        r = z[N * m:2 * N * m]
        s = z[2 * N * m:]
        x_pred = mats.Phi.value @ xn.value + mats.Psi.value @ du
        if spec.form == PRESTABILIZED:
            u_seq = mats.Kbig.value @ np.vstack([xn.value, x_pred]) + du
        else:
            u_seq = du
        # keep the tape from growing across a long simulation
        del tape.nodes[self._n_static:]
        return StepResult(
            u_seq[:m].copy(), u_seq.reshape(N, m), du.reshape(N, m),
            np.vstack([xn.value.T, x_pred.reshape(N, n)]),
            float(np.max(r, initial=0.0)), float(np.max(s, initial=0.0)), sol)


def mpc_step(spec, x_t, settings=None):
    return MpcController(spec, settings).step(x_t)


@dataclass
class Trajectory:
    states: np.ndarray                 # (T+1) x n
    controls: np.ndarray               # T x m
    predicted_controls: list = field(default_factory=list)   # T arrays, N x m
    predicted_states: list = field(default_factory=list)     # T arrays, (N+1) x n
    dt: float = 1.0
    max_input_slack: np.ndarray = None
    max_state_slack: np.ndarray = None
    failed_step: int = None

    @property
    def T(self):
        return self.controls.shape[0]

    def prediction_errors(self):
        """``err[t, k] = ||x_hat_t(k) - x_{t+k}||_inf`` (NaN past the trajectory end)."""
        T = self.T
        N = max((p.shape[0] - 1 for p in self.predicted_states), default=0)
        err = np.full((T, N + 1), np.nan)
        for t, pred in enumerate(self.predicted_states):
            for k in range(pred.shape[0]):
                if t + k <= T:
                    err[t, k] = np.max(np.abs(pred[k] - self.states[t + k]))
        return err

    def prediction_mismatch(self):
        err = self.prediction_errors()
        return float(np.nanmax(err)) if np.isfinite(err).any() else 0.0


def simulate_closed_loop(spec, x0, T, plant=None, settings=None):
    """Run the MPC in closed loop for ``T`` steps on ``plant`` (default: the model)."""
    plant = plant or spec.system
    ctrl = MpcController(spec, settings)
    x = np.reshape(np.asarray(x0, dtype=float), (-1, 1))
    states, controls, pu, px, rmax, smax = [x.ravel()], [], [], [], [], []
    for t in range(T):
        res = ctrl.step(x)
        x = plant.step(x, res.u)
        states.append(x.ravel())
        controls.append(res.u.ravel())
        pu.append(res.controls)
        px.append(res.states)
        rmax.append(res.max_input_slack)
        smax.append(res.max_state_slack)
    return Trajectory(
        np.array(states), np.array(controls).reshape(T, spec.m), pu, px, plant.dt,
        np.array(rmax), np.array(smax))


def generate_expert(spec, x0, T, match_tol=C.EXPERT_MATCH, max_horizon=C.EXPERT_MAX_HORIZON,
                    settings=None):
    """Closed-loop data from the infinite-horizon MPC and the horizon that certifies it.

    ``spec.N`` is ignored. The terminal cost and pre-stabilizing gain come
    from the DARE; the horizon is doubled from 2 until predictions match
    the closed loop to ``match_tol``, then bisected down to the smallest
    matching horizon. Returns ``(trajectory, N_inf)``.
    """
    base = infinite_horizon(spec, N=1)
    cache = {}

    def run(N):
        if N not in cache:
            traj = simulate_closed_loop(replace(base, N=N), x0, T, settings=settings)
            cache[N] = (traj, traj.prediction_mismatch())
        return cache[N]

    N = 2
    while run(N)[1] > match_tol:
        if N >= max_horizon:
            raise ExpertHorizonError(
                f"no horizon up to {max_horizon} matches; best deviation {run(N)[1]:.3e}", N, run(N)[1])
        N = min(2 * N, max_horizon)
    lo, hi = (N // 2 if N > 2 else 0), N
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if run(mid)[1] <= match_tol:
            hi = mid
        else:
            lo = mid
    return run(hi)[0], hi


class ExpertHorizonError(NumericalError):
    def __init__(self, msg, horizon, deviation):
        super().__init__(msg)
        self.horizon, self.deviation = horizon, deviation


def qp_node_for_state(tape, mats, x, settings=None):
    """Solve the condensed QP at state node ``x``; returns ``(z_node, solution)``."""
    q, lb, ub = condensed_vectors(tape, mats, x)
    lb_clean = tape.custom("bounds", (lb,), _clean_bounds(lb.value))
    ub_clean = tape.custom("bounds", (ub,), _clean_bounds(ub.value))
    return qp_custom_node(tape, mats.H, q, mats.M, lb_clean, ub_clean, settings)
