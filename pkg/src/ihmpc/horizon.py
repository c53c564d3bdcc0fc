"""Sampling-based verification and reduction of a trained MPC horizon.

A candidate horizon ``Nb`` is accepted on a box ``X`` when, for every
sampled initial state, the optimal perturbations of the pre-stabilizing
feedback vanish (to ``eps`` in the infinity norm) from prediction index
``Nb - 1`` onward, i.e. the controller has reduced to the LQR law there.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import QpError
from .mpc import PRESTABILIZED, MpcController, infinite_horizon

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HorizonQuery:
    N: int
    lower: np.ndarray
    upper: np.ndarray
    eps: float = 1e-6
    n_s: int = 500
    eta: float = 0.5
    seed: int = 0
    max_shrinks: int = 20

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs matching lower <= upper corners")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.n_s < 1:
            raise ValueError("n_s must be >= 1")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


@dataclass
class HorizonResult:
    accepted: bool
    N_bar: int = None          # accepted horizon, or the suggested retraining horizon on failure
    lower: np.ndarray = None
    upper: np.ndarray = None
    scale: float = None
    report: list = field(default_factory=list)   # (N_bar, scale, violations, max tail norm)

    @property
    def suggestion(self):
        return None if self.accepted else self.N_bar


def tail_norms(perturbations):
    """``out[k] = max_{j >= k} ||du_j||_inf`` for an ``N x m`` perturbation array."""
    row = np.max(np.abs(perturbations), axis=1)
    return np.maximum.accumulate(row[::-1])[::-1]


def _check(ctrl, states, N_bar, eps):
    violations, worst = 0, 0.0
    for x in states:
        try:
            du = ctrl.step(x).perturbations
        except QpError:
            violations += 1
            worst = np.inf
            continue
        tail = tail_norms(du)[N_bar - 1]
        worst = max(worst, float(tail))
        violations += tail > eps
    return violations, worst


def verify_reduce(spec, query):
    """Smallest horizon whose sampled perturbation tail is below ``eps``.

    Starting from ``N_bar = N`` the candidate is decremented while it keeps
    passing on fresh samples; if ``N`` itself fails, the box shrinks by
    ``eta`` about the origin. After ``max_shrinks`` failed boxes the result
    is a failure suggesting retraining with ``N + 1``.
    """
    spec = infinite_horizon(spec, N=query.N, form=PRESTABILIZED)
    if query.lower.size != spec.n:
        raise ValueError(f"box has {query.lower.size} coordinates, state has {spec.n}")
    ctrl = MpcController(spec)
    rng = np.random.default_rng(query.seed)
    result = HorizonResult(False)
    scale = 1.0
    for _ in range(query.max_shrinks + 1):
        lo, hi = scale * query.lower, scale * query.upper
        passed = None
        for N_bar in range(query.N, 0, -1):
            states = rng.uniform(lo, hi, size=(query.n_s, spec.n))
            violations, worst = _check(ctrl, states, N_bar, query.eps)
            result.report.append((N_bar, scale, int(violations), worst))
            if violations:
                break
            passed = N_bar
        if passed is not None:
            result.accepted, result.N_bar = True, passed
            result.lower, result.upper, result.scale = lo, hi, scale
            return result
        log.info("horizon %d fails on box scale %g; shrinking", query.N, scale)
        scale *= query.eta
    result.N_bar = query.N + 1
    return result
