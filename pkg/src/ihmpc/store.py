"""File formats: trajectory, loss-record and horizon-report CSVs, and JSON parameter checkpoints."""
import csv
import json
from pathlib import Path

import numpy as np

from .mpc import LtiSystem, MpcSpec, Trajectory


def _fmt(v):
    return format(float(v), ".17g")


def write_trajectory(path, traj):
    """``t,x_0..x_{n-1},u_0..u_{m-1}``; the final state row has empty controls."""
    n, m = traj.states.shape[1], traj.controls.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(m)])
        for k, x in enumerate(traj.states):
            u = traj.controls[k] if k < traj.T else [""] * m
            w.writerow([_fmt(k * traj.dt)] + [_fmt(v) for v in x] + [_fmt(v) if v != "" else "" for v in u])


def read_trajectory(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(h.startswith("x_") for h in header)
    states = np.array([[float(v) for v in r[1:1 + n]] for r in body])
    controls = np.array([[float(v) for v in r[1 + n:]] for r in body[:-1]])
    dt = float(body[1][0]) if len(body) > 1 else 1.0
    return Trajectory(states, controls.reshape(len(body) - 1, -1), dt=dt)


def write_prediction_errors(path, traj):
    err = traj.prediction_errors()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"k_{k}" for k in range(err.shape[1])])
        for t, row in enumerate(err):
            w.writerow([t] + ["" if np.isnan(v) else _fmt(v) for v in row])


def write_train_record(path, rec):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "imitation_loss", "reference_loss", "failures"])
        for i, loss, ref, fail in rec.rows():
            w.writerow([i, _fmt(loss), _fmt(ref), fail])


def write_horizon_report(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate", "box_scale", "violations", "max_tail_norm"])
        for n_bar, scale, viol, worst in result.report:
            w.writerow([n_bar, _fmt(scale), viol, _fmt(worst)])


def spec_to_dict(spec):
    out = {k: np.asarray(v).tolist() for k, v in spec.values().items() if k not in ("QN", "K")}
    out.update(ku=spec.ku, kx=spec.kx, N=spec.N, dt=spec.system.dt)
    return out


def spec_from_dict(d):
    """Rebuild a standard-form spec; callers derive terminal cost and gain from the DARE."""
    sys = LtiSystem(np.array(d["A"]), np.array(d["B"]), float(d["dt"]))
    return MpcSpec(sys, np.array(d["Q"]), np.array(d["R"]), np.array(d["Q"]), int(d["N"]),
                   x_lb=np.array(d["x_lb"]), x_ub=np.array(d["x_ub"]),
                   u_lb=np.array(d["u_lb"]), u_ub=np.array(d["u_ub"]),
                   ku=float(d["ku"]), kx=float(d["kx"]))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
