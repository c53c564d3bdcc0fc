"""Ready-made expert and learner setups for the mass-spring-damper and platoon studies."""
from dataclasses import replace

import numpy as np

from . import constants as C
from .mpc import PRESTABILIZED, MpcSpec, generate_expert, infinite_horizon, simulate_closed_loop
from .plants import MsdParams, PlatoonParams, msd_discretize, platoon_build, sample_initial_conditions

MSD_X0 = (0.0, 3.0)
MSD_TEST_X0 = (0.5, 2.0)
MSD_STEPS = 50


def msd_spec(c, N=6, ku=100.0, kx=100.0):
    """Expert controller for the damper coefficient ``c`` (terminal cost and gain from the DARE)."""
    sys = msd_discretize(MsdParams(c=c))
    spec = MpcSpec(
        sys, np.eye(2), np.array([[2.0]]), np.eye(2), N,
        x_lb=[-1.0, -C.INF], x_ub=[1.0, C.INF], u_lb=[-C.INF], u_ub=[0.5], ku=ku, kx=kx)
    return infinite_horizon(spec, N=N)


def msd_expert(c, x0=MSD_X0, T=MSD_STEPS, settings=None):
    """``(spec at N_inf, trajectory, N_inf)``."""
    spec = msd_spec(c)
    traj, N_inf = generate_expert(spec, x0, T, settings=settings)
    return replace(spec, N=N_inf), traj, N_inf


def perturb_A(spec, N, seed, scale=0.5):
    """Learner start: true A plus elementwise U[-scale, scale] noise, horizon N."""
    rng = np.random.default_rng(seed)
    A = spec.system.A + rng.uniform(-scale, scale, size=spec.system.A.shape)
    sys = replace(spec.system, A=A)
    return infinite_horizon(replace(spec, system=sys, K=None, form="standard"), N=N)


def platoon_spec(p=PlatoonParams(), N=15, Q=None, R=None):
    sys, bounds = platoon_build(p)
    Q = np.eye(sys.n) if Q is None else Q
    R = np.eye(sys.m) if R is None else R
    spec = MpcSpec(sys, Q, R, np.eye(sys.n), N, **bounds)
    return infinite_horizon(spec, N=N)


def platoon_steps(p, duration=20.0):
    return int(np.ceil(duration / p.dt - 1e-12))


def platoon_experts(p, count, seed, N=None, settings=None):
    """Expert platoon trajectories from seeded initial conditions.

    With ``N`` given the expert runs at that fixed horizon; otherwise each
    run searches for its own certifying horizon. Returns ``(spec, trajectories)``.
    """
    spec = platoon_spec(p)
    T = platoon_steps(p)
    trajs = []
    for x0 in sample_initial_conditions(p, count, seed):
        if N is None:
            traj, _ = generate_expert(spec, x0, T, settings=settings)
        else:
            traj = simulate_closed_loop(replace(spec, N=N), x0, T, settings=settings)
        trajs.append(traj)
    return spec, trajs


def random_diag_costs(spec, N, seed, high=3.0):
    """Learner start: diagonal Q, R with entries U[0, high] (floored to keep R positive definite)."""
    rng = np.random.default_rng(seed)
    q = np.maximum(rng.uniform(0.0, high, size=spec.n), C.PSD_FLOOR)
    r = np.maximum(rng.uniform(0.0, high, size=spec.m), C.PSD_FLOOR)
    base = replace(spec, Q=np.diag(q), R=np.diag(r), K=None, form="standard")
    return infinite_horizon(base, N=N, form=PRESTABILIZED)
