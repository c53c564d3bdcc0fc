"""Experiment plants: mass-spring-damper family and a longitudinal vehicle platoon."""
from dataclasses import dataclass

import numpy as np

from . import constants as C
from .linalg import expm
from .mpc import LtiSystem

# damping coefficients of the seven mass-spring-damper systems
MSD_DAMPING = (1.0, 0.5, 0.1, -0.1, -0.3, -0.5, -0.6)


@dataclass(frozen=True)
class MsdParams:
    m: float = 1.0
    c: float = 1.0
    k: float = 1.0
    dt: float = 0.2

    def __post_init__(self):
        if self.m <= 0 or self.dt <= 0:
            raise ValueError("mass and timestep must be positive")

    def continuous(self):
        Ac = np.array([[0.0, 1.0], [-self.k / self.m, -self.c / self.m]])
        Bc = np.array([[0.0], [1.0 / self.m]])
        return Ac, Bc


def zoh(Ac, Bc, dt):
    """Zero-order-hold discretization via the exponential of ``[[Ac, Bc], [0, 0]] dt``."""
    n, m = Bc.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = Ac
    aug[:n, n:] = Bc
    E = expm(aug * dt)
    return E[:n, :n], E[:n, n:]


def msd_discretize(p):
    Ac, Bc = p.continuous()
    A, B = zoh(Ac, Bc, p.dt)
    return LtiSystem(A, B, p.dt)


@dataclass(frozen=True)
class PlatoonParams:
    n_v: int = 10
    dt: float = 0.7
    y_ss: float = 30.0
    y_min: float = 10.0
    a: float = 1.0
    b: float = -2.0
    margin: float = 2.0
    span: float = 20.0
    v_max: float = 2.0

    def __post_init__(self):
        if self.n_v < 2:
            raise ValueError("a platoon needs at least two vehicles")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.y_min < self.y_ss:
            raise ValueError("y_min must be below y_ss")
        if not self.b < 0 < self.a:
            raise ValueError("need b < 0 < a")


def difference_matrix(n_v):
    """``(n_v - 1) x n_v`` bidiagonal matrix with rows ``(-1, 1)``."""
    D = np.zeros((n_v - 1, n_v))
    idx = np.arange(n_v - 1)
    D[idx, idx] = -1.0
    D[idx, idx + 1] = 1.0
    return D


def platoon_build(p):
    """Relative-position/velocity platoon model and its constraint boxes.

    Returns ``(system, bounds)`` with ``bounds`` a dict of ``x_lb, x_ub, u_lb, u_ub``.
    """
    k = p.n_v - 1
    Bh = difference_matrix(p.n_v)
    I, O = np.eye(k), np.zeros((k, k))
    A = np.block([[I, p.dt * I], [O, I]])
    B = np.vstack([0.5 * p.dt ** 2 * Bh, p.dt * Bh])
    bounds = {
        "x_lb": np.concatenate([np.full(k, p.y_min - p.y_ss), np.full(k, -C.INF)]),
        "x_ub": np.full(2 * k, C.INF),
        "u_lb": np.full(p.n_v, p.b),
        "u_ub": np.full(p.n_v, p.a),
    }
    return LtiSystem(A, B, p.dt), bounds


def sample_initial_conditions(p, count, seed):
    """Uniform relative positions in ``[y_min - y_ss + margin, span]`` and velocities in ``[-v_max, v_max]``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    k = p.n_v - 1
    lo = p.y_min - p.y_ss + p.margin
    out = []
    for _ in range(count):
        pos = rng.uniform(lo, p.span, size=k)
        vel = rng.uniform(-p.v_max, p.v_max, size=k)
        out.append(np.concatenate([pos, vel]))
    return out
