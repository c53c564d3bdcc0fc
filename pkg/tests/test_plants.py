import numpy as np
import pytest

from ihmpc import constants as C

from ihmpc.experiments import platoon_experts
from ihmpc.plants import (
    MSD_DAMPING, MsdParams, PlatoonParams, difference_matrix, msd_discretize, platoon_build,
    sample_initial_conditions, zoh,
)


def test_double_integrator():
    dt = 0.3
    sys = msd_discretize(MsdParams(c=0.0, k=0.0, dt=dt))
    np.testing.assert_allclose(sys.A, [[1, dt], [0, 1]], atol=1e-15)
    np.testing.assert_allclose(sys.B, [[dt ** 2 / 2], [dt]], atol=1e-15)


def test_cross_formula_with_invertible_dynamics():
    p = MsdParams(m=1, k=1, c=1, dt=0.2)
    Ac, Bc = p.continuous()
    sys = msd_discretize(p)
    np.testing.assert_allclose(sys.B, (sys.A - np.eye(2)) @ np.linalg.solve(Ac, Bc), atol=1e-12)


def rk4_hold(Ac, Bc, x, u, dt, steps=1000):
    h = dt / steps
    f = lambda z: Ac @ z + Bc @ u
    for _ in range(steps):
        k1 = f(x)
        k2 = f(x + h / 2 * k1)
        k3 = f(x + h / 2 * k2)
        k4 = f(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


@pytest.mark.parametrize("c", [1.0, -0.6])
def test_zoh_matches_fine_integration(c):
    p = MsdParams(c=c)
    Ac, Bc = p.continuous()
    sys = msd_discretize(p)
    x, u = np.array([0.4, -1.3]), np.array([0.7])
    np.testing.assert_allclose(rk4_hold(Ac, Bc, x, u, p.dt), sys.A @ x + sys.B @ u, atol=1e-8)


def test_damping_sign_sets_stability():
    radii = [max(abs(np.linalg.eigvals(msd_discretize(MsdParams(c=c)).A))) for c in MSD_DAMPING]
    for c, rho in zip(MSD_DAMPING, radii):
        assert (rho < 1) == (c > 0)


def test_zoh_with_several_inputs():
    rng = np.random.default_rng(1)
    Ac, Bc = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    A, B = zoh(Ac, Bc, 0.1)
    x, u = rng.normal(size=3), rng.normal(size=2)
    np.testing.assert_allclose(rk4_hold(Ac, Bc, x, u, 0.1), A @ x + B @ u, atol=1e-10)


def test_msd_params_validation():
    with pytest.raises(ValueError):
        MsdParams(m=0)
    with pytest.raises(ValueError):
        MsdParams(dt=-1)


def test_platoon_dimensions_and_bounds():
    sys, bounds = platoon_build(PlatoonParams(n_v=10))
    assert (sys.n, sys.m) == (18, 10)
    np.testing.assert_array_equal(bounds["x_lb"][:9], -20.0)
    assert np.all(bounds["x_lb"][9:] == -C.INF) and np.all(bounds["x_ub"] == C.INF)
    np.testing.assert_array_equal(bounds["u_lb"], -2.0)
    np.testing.assert_array_equal(bounds["u_ub"], 1.0)
    assert max(abs(np.linalg.eigvals(sys.A))) == pytest.approx(1.0)


def test_two_vehicle_chain():
    np.testing.assert_array_equal(difference_matrix(2), [[-1, 1]])
    sys, _ = platoon_build(PlatoonParams(n_v=2, dt=1.0))
    np.testing.assert_array_equal(sys.B, [[-0.5, 0.5], [-1.0, 1.0]])


def test_platoon_translation_invariance():
    sys, _ = platoon_build(PlatoonParams(n_v=5))
    x = np.arange(8.0)
    np.testing.assert_allclose(sys.A @ x + sys.B @ np.full(5, 0.8), sys.A @ x, atol=1e-14)


def test_platoon_params_validation():
    with pytest.raises(ValueError):
        PlatoonParams(n_v=1)
    with pytest.raises(ValueError):
        PlatoonParams(y_min=40.0)
    with pytest.raises(ValueError):
        PlatoonParams(b=1.0)


def test_initial_conditions_feasible_and_seeded():
    p = PlatoonParams(n_v=10)
    a = sample_initial_conditions(p, 20, seed=3)
    b = sample_initial_conditions(p, 20, seed=3)
    assert len(a) == 20
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert np.all(x[:9] >= p.y_min - p.y_ss + p.margin)
        assert np.all(np.abs(x[9:]) <= p.v_max)
    with pytest.raises(ValueError):
        sample_initial_conditions(p, 0, 0)


def test_expert_platoon_runs_are_feasible():
    p = PlatoonParams(n_v=4)
    _, trajs = platoon_experts(p, 4, seed=0, N=15)
    starts = {tuple(t.states[0]) for t in trajs}
    assert len(starts) == 4
    for t in trajs:
        assert np.min(t.states[:, :3]) >= p.y_min - p.y_ss - 1e-6
        assert np.all(t.controls >= p.b - 1e-6) and np.all(t.controls <= p.a + 1e-6)
