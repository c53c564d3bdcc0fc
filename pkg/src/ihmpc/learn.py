"""Imitation learning of MPC parameters through the DARE and the QP."""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import constants as C
from .errors import NoStabilizingSolution, NumericalError, QpError, SingularKkt, Z1Singular
from .graph import Tape
from .linalg import is_infinite, symmetrize
from .mpc import (
    PRESTABILIZED, STANDARD, LtiSystem, infinite_horizon, condensed_matrices, predicted_controls,
    qp_node_for_state, spec_nodes,
)
from .qp import QpSettings
from .riccati import dare_custom_node

log = logging.getLogger(__name__)

LEARNABLE = ("A", "B", "Q", "R", "bounds", "ku", "kx")
BOUND_NAMES = ("x_lb", "x_ub", "u_lb", "u_ub")


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, hyper=AdamHyper(), masks=None):
    """One Adam update; ``masks[name]`` zeroes gradient entries that must not move."""
    masks = masks or {}
    state.t += 1
    out = {}
    for name, w in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(w)), dtype=float)
        if name in masks:
            g = g * masks[name]
        m = hyper.beta1 * state.m.get(name, np.zeros_like(w)) + (1 - hyper.beta1) * g
        v = hyper.beta2 * state.v.get(name, np.zeros_like(w)) + (1 - hyper.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - hyper.beta1 ** state.t)
        v_hat = v / (1 - hyper.beta2 ** state.t)
        out[name] = w - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return out, state


@dataclass(frozen=True)
class TrainConfig:
    learnable: tuple = ("A",)
    structure: dict = field(default_factory=dict)   # name -> "full" | "diag"
    beta: float = 0.0
    epochs: int = 1000
    N: int = 6
    adam: AdamHyper = AdamHyper()
    reference: dict = field(default_factory=dict)   # name -> true value, for monitoring only
    qp: QpSettings = QpSettings()

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        bad = set(self.learnable) - set(LEARNABLE)
        if bad:
            raise ValueError(f"cannot learn {sorted(bad)}")
        for name, kind in self.structure.items():
            if kind not in ("full", "diag"):
                raise ValueError(f"unknown structure {kind!r} for {name}")

    @property
    def param_names(self):
        names = []
        for k in self.learnable:
            names.extend(BOUND_NAMES if k == "bounds" else (k,))
        return tuple(names)


@dataclass
class TrainRecord:
    imitation_loss: list = field(default_factory=list)
    reference_loss: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    halted: str = None

    def rows(self):
        for i, (l, r, f) in enumerate(zip(self.imitation_loss, self.reference_loss, self.failures)):
            yield i, l, r, f


def windows(batch, N):
    """``(trajectory index, t)`` for every sample whose N-step window fits in the data."""
    out = []
    for j, traj in enumerate(batch):
        for t in range(traj.controls.shape[0] - N + 1):
            out.append((j, t))
    return out


@dataclass
class LossResult:
    loss: float
    grads: dict
    samples: int
    failures: list


def imitation_loss(tape, params, batch, N, beta, settings=None, failures=None):
    """Record the imitation loss on ``tape``; returns the scalar loss node.

    Mean over samples of ``||u_{t:t+N} - u_hat(x_t)||^2 + beta ||A x_t + B u_t - x_{t+1}||^2``.
    Samples whose QP cannot be solved are skipped and appended to ``failures``.
    """
    failures = [] if failures is None else failures
    P, K, _ = dare_custom_node(tape, params["A"], params["B"], params["Q"], params["R"])
    p = dict(params, QN=P, K=K)
    mats = condensed_matrices(tape, p, N, PRESTABILIZED)
    terms = []
    for j, t in windows(batch, N):
        traj = batch[j]
        x = tape.const(traj.states[t].reshape(-1, 1))
        try:
            z, sol = qp_node_for_state(tape, mats, x, settings)
        except QpError as exc:
            failures.append((j, t, str(exc)))
            continue
        z.attrs["ctx"].skip_singular = True
        z.attrs["ctx"].sample = (j, t)
        z.attrs["ctx"].failures = failures
        u_hat, _ = predicted_controls(tape, mats, x, z)
        target = tape.const(traj.controls[t:t + N].reshape(-1, 1))
        diff = u_hat - target
        term = diff.T @ diff
        if beta > 0 and t + 1 < traj.states.shape[0]:
            u = tape.const(traj.controls[t].reshape(-1, 1))
            w = p["A"] @ x + p["B"] @ u - tape.const(traj.states[t + 1].reshape(-1, 1))
            term = term + tape.scale(w.T @ w, beta)
        terms.append(term)
    if not terms:
        raise NumericalError("no usable samples in the batch")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return tape.scale(total, 1.0 / len(terms)), len(terms)


def loss_and_grad(spec, batch, N, beta=0.0, names=(), settings=None):
    """Forward and backward pass at ``spec``; gradients keyed by parameter name."""
    tape = Tape()
    params = spec_nodes(tape, spec, learnable=names)
    failures = []
    loss, count = imitation_loss(tape, params, batch, N, beta, settings, failures)
    grads = {}
    if names:
        tape.backward(loss)
        grads = {k: tape.grad(params[k]) for k in names}
    return LossResult(float(loss.value[0, 0]), grads, count, failures)


def make_masks(spec, config):
    values = spec.values()
    masks = {}
    for name in config.param_names:
        mask = np.ones_like(values[name])
        if config.structure.get(name) == "diag":
            mask = np.eye(mask.shape[0])
        if name in BOUND_NAMES:
            mask = (~is_infinite(values[name])).astype(float)
        masks[name] = mask
    return masks


def _project(name, w, structure):
    if name not in ("Q", "R"):
        return w
    if structure == "diag":
        return np.diag(np.maximum(np.diag(w), C.PSD_FLOOR))
    w = symmetrize(w)
    vals, vecs = np.linalg.eigh(w)
    return symmetrize(vecs @ np.diag(np.maximum(vals, C.PSD_FLOOR)) @ vecs.T)


def spec_with(spec, values):
    """Copy of ``spec`` with parameters replaced from a name -> value dict."""
    sys = spec.system
    A = values.get("A", sys.A)
    B = values.get("B", sys.B)
    kw = {k: values[k] for k in ("Q", "R") + BOUND_NAMES if k in values}
    if "ku" in values:
        kw["ku"] = float(np.asarray(values["ku"]).ravel()[0])
    if "kx" in values:
        kw["kx"] = float(np.asarray(values["kx"]).ravel()[0])
    # the old gain may not stabilize the new model; the DARE recomputes it each forward pass
    return replace(spec, system=LtiSystem(A, B, sys.dt), K=None, form=STANDARD, **kw)


def reference_loss(spec, reference):
    values = spec.values()
    return float(sum(np.sum((values[k] - np.asarray(v)) ** 2) for k, v in reference.items()))


def train(config, batch, init_spec, callback=None):
    """Gradient-based imitation learning of ``config.learnable``.

    Each iteration solves the DARE, sets the terminal cost and feedback
    gain, solves one pre-stabilized MPC QP per sample, and takes an Adam
    step on the mean imitation loss. Returns ``(final_spec, record)``.
    """
    names = config.param_names
    masks = make_masks(init_spec, config)
    spec = init_spec
    state = AdamState()
    rec = TrainRecord()
    for it in range(config.epochs):
        try:
            res = loss_and_grad(spec, batch, config.N, config.beta, names, config.qp)
        except (NoStabilizingSolution, Z1Singular) as exc:
            rec.halted = f"iteration {it}: {type(exc).__name__}: {exc}"
            log.warning("training halted at %s", rec.halted)
            break
        rec.imitation_loss.append(res.loss)
        rec.reference_loss.append(reference_loss(spec, config.reference))
        rec.failures.append(len(res.failures))
        if callback is not None:
            callback(it, spec, res)
        if not names:
            continue
        values = spec.values()
        new, state = adam_step({k: values[k] for k in names}, res.grads, state, config.adam, masks)
        new = {k: _project(k, v, config.structure.get(k, "full")) for k, v in new.items()}
        spec = spec_with(spec, new)
    try:
        spec = infinite_horizon(spec, N=config.N)
    except NumericalError as exc:
        rec.halted = rec.halted or f"final parameters: {type(exc).__name__}: {exc}"
    return spec, rec


__all__ = [
    "AdamHyper", "AdamState", "TrainConfig", "TrainRecord", "adam_step", "imitation_loss",
    "loss_and_grad", "train", "windows", "spec_with", "SingularKkt",
]
