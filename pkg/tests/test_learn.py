from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg as sla

from ihmpc import constants as C
from ihmpc.experiments import msd_expert, msd_spec, perturb_A
from ihmpc.gradcheck import end_to_end_check, scalar_learning_setup
from ihmpc.learn import (
    AdamHyper, AdamState, TrainConfig, adam_step, loss_and_grad, spec_with, train, windows,
)
from ihmpc.mpc import LtiSystem, MpcSpec, Trajectory, infinite_horizon

INF = C.INF


def lqr_gain(a, b, q, r):
    P = sla.solve_discrete_are([[a]], [[b]], [[q]], [[r]])[0, 0]
    return -b * P * a / (r + b * P * b)


def test_adam_first_step_is_lr_times_sign():
    for g in (1.0, -3.0, 1e-4):
        new, _ = adam_step({"w": np.array([[2.0]])}, {"w": np.array([[g]])}, AdamState())
        assert new["w"][0, 0] - 2.0 == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_adam_zero_gradient_and_mask():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    new, _ = adam_step({"w": w}, {"w": np.zeros((2, 2))}, AdamState())
    np.testing.assert_array_equal(new["w"], w)
    new, _ = adam_step({"w": w}, {"w": np.ones((2, 2))}, AdamState(), masks={"w": np.eye(2)})
    np.testing.assert_array_equal(new["w"][[0, 1], [1, 0]], [2.0, 3.0])
    np.testing.assert_allclose(np.diag(new["w"]), [1 - 1e-3, 4 - 1e-3])


def test_adam_matches_hand_recurrence():
    hyper = AdamHyper(lr=0.1)
    state, w = AdamState(), {"w": np.array([0.0])}
    m = v = 0.0
    ref = 0.0
    for t, g in enumerate([1.0, -2.0, 0.5], start=1):
        w, state = adam_step(w, {"w": np.array([g])}, state, hyper)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert w["w"][0] == pytest.approx(ref, rel=1e-12)


def test_windows_drop_overrunning_samples():
    traj = Trajectory(np.zeros((51, 2)), np.zeros((50, 1)))
    assert len(windows([traj], 6)) == 45
    assert len(windows([traj, traj], 1)) == 100


def unconstrained_scalar(a=1.1, b=0.8, q=1.3, r=0.6):
    sys = LtiSystem([[a]], [[b]])
    spec = MpcSpec(sys, [[q]], [[r]], [[q]], 1, x_lb=[-INF], x_ub=[INF], u_lb=[-INF], u_ub=[INF])
    return infinite_horizon(spec, N=1)


def test_scalar_loss_against_riccati_oracle():
    a, b, q, r = 1.1, 0.8, 1.3, 0.6
    spec = unconstrained_scalar(a, b, q, r)
    xs = np.array([[1.0], [-0.5], [2.0], [0.3]])
    us = np.array([[0.2], [0.4], [-1.0]])
    batch = [Trajectory(xs, us)]
    res = loss_and_grad(spec, batch, 1, names=("A",))
    k = lqr_gain(a, b, q, r)
    assert res.loss == pytest.approx(np.mean((us[:, 0] - k * xs[:3, 0]) ** 2), rel=1e-10)
    h = 1e-6
    dk = (lqr_gain(a + h, b, q, r) - lqr_gain(a - h, b, q, r)) / (2 * h)
    grad = np.mean(-2 * (us[:, 0] - k * xs[:3, 0]) * xs[:3, 0] * dk)
    assert res.grads["A"][0, 0] == pytest.approx(grad, rel=1e-6)


def test_model_error_term():
    spec = unconstrained_scalar()
    xs = np.array([[1.0], [0.0]])
    us = np.array([[0.5]])
    base = loss_and_grad(spec, [Trajectory(xs, us)], 1).loss
    with_model = loss_and_grad(spec, [Trajectory(xs, us)], 1, beta=2.0).loss
    assert with_model - base == pytest.approx(2.0 * (1.1 * 1.0 + 0.8 * 0.5) ** 2, rel=1e-10)


@pytest.fixture(scope="module")
def msd_case():
    return msd_expert(-0.3)


def test_loss_vanishes_at_generating_parameters(msd_case):
    spec, traj, N_inf = msd_case
    res = loss_and_grad(spec, [traj], N_inf, names=("A",))
    assert res.loss <= 1e-12
    assert res.samples == 50 - N_inf + 1
    # a shorter learner horizon cannot reproduce an expert that needed N_inf
    assert loss_and_grad(infinite_horizon(spec, N=6), [traj], 6).loss > 1e-6


def test_adam_step_from_truth_stays_tiny(msd_case):
    spec, traj, N_inf = msd_case
    cfg = TrainConfig(epochs=2, N=N_inf)
    _, rec = train(cfg, [traj], spec)
    assert rec.imitation_loss[0] <= 1e-12
    assert rec.imitation_loss[1] <= 1e-10


def test_empty_learnable_gives_flat_loss(msd_case):
    spec, traj, _ = msd_case
    init = perturb_A(spec, 6, seed=0)
    _, rec = train(TrainConfig(learnable=(), epochs=3, N=6), [traj], init)
    assert rec.imitation_loss[0] == rec.imitation_loss[1] == rec.imitation_loss[2]


def test_training_reduces_loss_and_is_deterministic(msd_case):
    spec, traj, _ = msd_case
    init = perturb_A(spec, 6, seed=4)
    cfg = TrainConfig(epochs=15, N=6, adam=AdamHyper(lr=1e-2), reference={"A": spec.system.A})
    out1, rec1 = train(cfg, [traj], init)
    out2, rec2 = train(cfg, [traj], init)
    assert rec1.imitation_loss[-1] < rec1.imitation_loss[0]
    assert rec1.imitation_loss == rec2.imitation_loss
    np.testing.assert_array_equal(out1.system.A, out2.system.A)
    assert len(rec1.reference_loss) == 15


def test_diagonal_structure_is_preserved():
    spec = msd_spec(0.5, N=3)
    traj = infinite_horizon(spec, N=3)
    from ihmpc.mpc import simulate_closed_loop
    data = simulate_closed_loop(traj, (0.0, 3.0), 12)
    init = spec_with(spec, {"Q": np.diag([2.0, 0.5]), "R": np.array([[1.0]])})
    init = infinite_horizon(init, N=3)
    cfg = TrainConfig(learnable=("Q", "R"), structure={"Q": "diag", "R": "diag"}, epochs=5, N=3,
                      adam=AdamHyper(lr=0.05))
    out, rec = train(cfg, [data], init)
    assert out.Q[0, 1] == 0 and out.Q[1, 0] == 0
    assert not np.allclose(np.diag(out.Q), [2.0, 0.5])
    assert len(rec.imitation_loss) == 5


def test_full_cost_matrix_stays_positive_definite():
    spec, traj = scalar_learning_setup()
    cfg = TrainConfig(learnable=("R",), epochs=4, N=2, adam=AdamHyper(lr=2.0))
    out, _ = train(cfg, [traj], spec)
    assert np.min(np.linalg.eigvalsh(out.R)) >= C.PSD_FLOOR


def test_end_to_end_gradient_matches_finite_differences():
    spec, traj = scalar_learning_setup()
    errs = end_to_end_check(spec, [traj], 2, 0.5, ("A", "B", "Q", "R", "x_ub", "u_lb", "u_ub"))
    assert max(errs.values()) <= 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-1)
    with pytest.raises(ValueError):
        TrainConfig(learnable=("P",))
    with pytest.raises(ValueError):
        TrainConfig(structure={"Q": "banded"})
    assert TrainConfig(learnable=("bounds",)).param_names == ("x_lb", "x_ub", "u_lb", "u_ub")


def test_spec_with_resets_gain():
    spec = msd_spec(1.0)
    new = spec_with(spec, {"A": 2 * spec.system.A})
    assert new.K is None and new.form == "standard"
    np.testing.assert_array_equal(new.system.A, 2 * spec.system.A)
