from dataclasses import replace

import numpy as np
import pytest

from ihmpc import constants as C
from ihmpc.experiments import msd_expert, msd_spec
from ihmpc.horizon import HorizonQuery, tail_norms, verify_reduce
from ihmpc.mpc import MpcSpec, simulate_closed_loop

INF = C.INF


def test_tail_norms():
    du = np.array([[0.1, -0.5], [0.0, 0.2], [0.05, 0.0]])
    np.testing.assert_allclose(tail_norms(du), [0.5, 0.2, 0.05])


def test_query_validation():
    for kw in ({"eps": 0}, {"n_s": 0}, {"eta": 1.0}, {"eta": 0.0}, {"N": 0},
               {"lower": [1, 0], "upper": [0, 0]}):
        args = dict(N=3, lower=[-1, -1], upper=[1, 1])
        args.update(kw)
        with pytest.raises(ValueError):
            HorizonQuery(**args)


def test_degenerate_box_accepts_one():
    res = verify_reduce(msd_spec(1.0), HorizonQuery(6, [0, 0], [0, 0], n_s=5))
    assert res.accepted and res.N_bar == 1 and res.scale == 1.0


def test_unconstrained_spec_accepts_one():
    spec = replace(msd_spec(-0.6), x_lb=np.full(2, -INF), x_ub=np.full(2, INF),
                   u_lb=[-INF], u_ub=[INF])
    res = verify_reduce(spec, HorizonQuery(5, [-50, -50], [50, 50], n_s=30))
    assert res.accepted and res.N_bar == 1


@pytest.fixture(scope="module")
def expert1():
    return msd_expert(1.0)


def test_system_one_reduces_and_matches(expert1):
    spec, _, N_inf = expert1
    res = verify_reduce(spec, HorizonQuery(N_inf, [-0.5, -0.5], [0.5, 0.5], n_s=100, seed=1))
    assert res.accepted and 1 <= res.N_bar <= N_inf
    rng = np.random.default_rng(99)
    for x0 in rng.uniform(res.lower, res.upper, size=(5, 2)):
        a = simulate_closed_loop(replace(spec, N=res.N_bar), x0, 30)
        b = simulate_closed_loop(spec, x0, 30)
        np.testing.assert_allclose(a.states, b.states, atol=1e-5)


def test_accepted_horizon_is_monotone(expert1):
    spec, _, N_inf = expert1
    q = HorizonQuery(N_inf, [-0.5, -0.5], [0.5, 0.5], n_s=50, seed=2)
    res = verify_reduce(spec, q)
    if res.N_bar < N_inf:
        bigger = verify_reduce(spec, replace(q, N=res.N_bar + 1))
        assert bigger.accepted and bigger.report[0][2] == 0


def test_large_box_shrinks_about_origin(expert1):
    spec, _, _ = expert1
    res = verify_reduce(spec, HorizonQuery(1, [-20, -20], [20, 20], n_s=50))
    assert res.accepted and res.scale < 1
    np.testing.assert_allclose(res.lower, -20 * res.scale)
    scales = [row[1] for row in res.report]
    assert scales == sorted(scales, reverse=True)


def test_failure_suggests_longer_horizon(expert1):
    spec, _, _ = expert1
    res = verify_reduce(spec, HorizonQuery(1, [-20, -20], [20, 20], n_s=50, max_shrinks=0))
    assert not res.accepted and res.suggestion == 2


def test_box_dimension_mismatch(expert1):
    spec, _, _ = expert1
    with pytest.raises(ValueError):
        verify_reduce(spec, HorizonQuery(2, [-1], [1]))
