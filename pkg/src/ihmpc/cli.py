"""Command-line front end: ``ihmpc {gen-expert,train,simulate,verify-horizon,gradcheck}``."""
import argparse
import copy
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import constants as C
from . import gradcheck as gc
from .errors import NumericalError
from .experiments import perturb_A, random_diag_costs
from .horizon import HorizonQuery, verify_reduce
from .learn import AdamHyper, TrainConfig, train
from .mpc import MpcSpec, LtiSystem, generate_expert, infinite_horizon, simulate_closed_loop
from .plants import MSD_DAMPING, MsdParams, PlatoonParams, msd_discretize, platoon_build, sample_initial_conditions
from .store import (
    read_json, read_trajectory, spec_from_dict, spec_to_dict, write_horizon_report, write_json,
    write_prediction_errors, write_train_record, write_trajectory,
)
from .svg import line_chart

log = logging.getLogger("ihmpc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

COMMON = {
    "seed": 0,
    "expert": {"Q": None, "R": None, "x_lb": None, "x_ub": None, "u_lb": None, "u_ub": None,
               "ku": 100.0, "kx": 100.0, "horizon": None},
    "learn": {"learnable": ["A"], "structure": {}, "init": "perturb-A", "init_scale": 0.5,
              "beta": 0.0, "epochs": 1000, "lr": 1e-3, "horizons": [2, 3, 6]},
    "simulate": {"x0": None, "steps": 50},
    "horizon": {"lower": None, "upper": None, "eps": 1e-6, "n_s": 500, "eta": 0.5, "max_shrinks": 20},
    "gradcheck": {"systems": 5, "qps": 5, "mutate": None},
}

KIND_DEFAULTS = {
    "msd": {
        "plant": {"m": 1.0, "k": 1.0, "dt": 0.2, "damping": list(MSD_DAMPING)},
        "expert": {"Q": [1.0, 1.0], "R": [2.0], "x_lb": [-1.0, None], "x_ub": [1.0, None],
                   "u_lb": [None], "u_ub": [0.5], "x0": [0.0, 3.0], "steps": 50},
        "simulate": {"x0": [0.5, 2.0], "steps": 50},
        "horizon": {"lower": [-0.5, -0.5], "upper": [0.5, 0.5]},
    },
    "platoon": {
        "plant": {"n_v": 10, "dt": 0.7, "y_ss": 30.0, "y_min": 10.0, "a": 1.0, "b": -2.0,
                  "margin": 2.0, "span": 20.0, "v_max": 2.0},
        "expert": {"instances": 20, "duration": 20.0},
        "learn": {"learnable": ["Q", "R"], "structure": {"Q": "diag", "R": "diag"},
                  "init": "random-diag", "init_scale": 3.0, "epochs": 500, "horizons": [5, 10, 15, 20]},
        "simulate": {"duration": 20.0},
    },
    "custom": {
        "plant": {"A": None, "B": None, "dt": 1.0},
        "expert": {"x0": None, "steps": 50},
    },
}

HELP_TABLE = """configuration (YAML), defaults per experiment kind:

  experiment        msd | platoon | custom        (required)
  seed              0
  plant             msd: m=1 k=1 dt=0.2 damping=[1,.5,.1,-.1,-.3,-.5,-.6]
                    platoon: n_v=10 dt=0.7 y_ss=30 y_min=10 a=1 b=-2 margin=2 span=20 v_max=2
                    custom: A, B (required), dt=1
  expert.Q, .R      matrix or list (diagonal); default identity (msd: Q=diag(1,1), R=2)
  expert.x_lb ...   bound lists, null entries mean unbounded (msd: x1 in [-1,1], u <= 0.5;
                    platoon: separation >= y_min, b <= u <= a)
  expert.ku, .kx    100, 100
  expert.horizon    null = search the certifying horizon, or a fixed integer
  expert.x0/steps   msd: (0,3), 50 steps; platoon: instances=20 over duration=20 s
  learn.learnable   msd: [A]; platoon: [Q, R]   (subset of A B Q R bounds ku kx)
  learn.structure   per-parameter full | diag   (platoon: diag Q, R)
  learn.init        perturb-A (U[-s,s] per entry) | random-diag (U[0,s]) | none
  learn.init_scale  0.5 (msd), 3.0 (platoon)
  learn.beta        0
  learn.epochs      1000 (msd), 500 (platoon)
  learn.lr          1e-3   (Adam moments 0.9, 0.999, eps 1e-8)
  learn.horizons    msd [2,3,6]; platoon [5,10,15,20]
  simulate.x0/steps msd (0.5,2), 50 steps; platoon: fresh sampled start, 20 s
  horizon.*         lower/upper box corners (msd +-0.5), eps=1e-6, n_s=500, eta=0.5, max_shrinks=20
  gradcheck.*       systems=5, qps=5, mutate=null (z2-sign flips Z2 to test the checker)

exit codes: 0 ok, 2 configuration or I/O error, 3 numerical failure, 4 check failed
"""


class ConfigError(ValueError):
    pass


def _merge(base, extra, path=""):
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and k != "structure":
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be a mapping")
            out[k] = _merge(out[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def load_config(path):
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    kind = raw.get("experiment", "msd")
    if kind not in KIND_DEFAULTS:
        raise ConfigError(f"unknown experiment {kind!r}")
    base = copy.deepcopy(COMMON)
    base.update(experiment=kind, plant={})
    for section, vals in KIND_DEFAULTS[kind].items():
        base[section] = dict(base.get(section, {}), **vals)
    return _merge(base, raw)


def _bounds(values, size, name):
    if values is None:
        return np.full(size, C.INF) * (-1 if name.endswith("lb") else 1)
    if len(values) != size:
        raise ConfigError(f"expert.{name} needs {size} entries")
    sign = -1 if name.endswith("lb") else 1
    return np.array([sign * C.INF if v is None else float(v) for v in values])


def _cost(value, size):
    if value is None:
        return np.eye(size)
    a = np.asarray(value, dtype=float)
    return np.diag(a) if a.ndim == 1 else a


def systems(cfg):
    """``[(system id, LtiSystem, default bounds or None)]`` for the configured experiment."""
    p = cfg["plant"]
    kind = cfg["experiment"]
    if kind == "msd":
        return [(i + 1, msd_discretize(MsdParams(m=p["m"], c=c, k=p["k"], dt=p["dt"])), None)
                for i, c in enumerate(p["damping"])]
    if kind == "platoon":
        sys_, bounds = platoon_build(platoon_params(cfg))
        return [(1, sys_, bounds)]
    if p["A"] is None or p["B"] is None:
        raise ConfigError("custom plant needs A and B")
    return [(1, LtiSystem(np.array(p["A"], float), np.array(p["B"], float), float(p["dt"])), None)]


def platoon_params(cfg):
    return PlatoonParams(**cfg["plant"])


def expert_spec(cfg, sys_, bounds):
    e = cfg["expert"]
    n, m = sys_.n, sys_.m
    b = {k: _bounds(e[k], n if k[0] == "x" else m, k) for k in ("x_lb", "x_ub", "u_lb", "u_ub")}
    if bounds is not None:
        b = {k: bounds[k] if e[k] is None else b[k] for k in b}
    spec = MpcSpec(sys_, _cost(e["Q"], n), _cost(e["R"], m), np.eye(n), e["horizon"] or 1,
                   ku=float(e["ku"]), kx=float(e["kx"]), **b)
    return infinite_horizon(spec)


def initial_states(cfg, seed_offset=0):
    e = cfg["expert"]
    if cfg["experiment"] == "platoon":
        return sample_initial_conditions(platoon_params(cfg), int(e["instances"]), cfg["seed"] + seed_offset)
    if e["x0"] is None:
        raise ConfigError("expert.x0 is required")
    return [np.array(e["x0"], float)]


def steps(cfg, section="expert"):
    s = cfg[section]
    if cfg["experiment"] == "platoon":
        return int(np.ceil(s["duration"] / cfg["plant"]["dt"] - 1e-12))
    return int(s["steps"])


def _prepare(out, sub, force):
    d = Path(out) / sub
    if d.exists() and any(d.iterdir()) and not force:
        raise ConfigError(f"{d} is not empty; pass --force to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _update_manifest(out, key, value):
    path = Path(out) / "manifest.json"
    data = read_json(path) if path.exists() else {}
    data[key] = value
    data["tolerances"] = {k: getattr(C, k) for k in dir(C) if k.isupper()}
    write_json(path, data)


def _save_svg(path, *args, **kw):
    Path(path).write_text(line_chart(*args, **kw))


def cmd_gen_expert(cfg, out, force):
    d = _prepare(out, "expert", force)
    T = steps(cfg)
    entries = []
    for sid, sys_, bounds in systems(cfg):
        spec = expert_spec(cfg, sys_, bounds)
        files, horizons = [], []
        for k, x0 in enumerate(initial_states(cfg)):
            if cfg["expert"]["horizon"] is None:
                traj, N = generate_expert(spec, x0, T)
            else:
                N = int(cfg["expert"]["horizon"])
                traj = simulate_closed_loop(replace(spec, N=N), x0, T)
            name = f"system_{sid}_{k}.csv"
            write_trajectory(d / name, traj)
            files.append(name)
            horizons.append(N)
            t = np.arange(traj.states.shape[0]) * traj.dt
            _save_svg(d / f"system_{sid}_{k}.svg",
                      [(f"x_{i}", t, traj.states[:, i]) for i in range(spec.n)]
                      + [(f"u_{j}", t[:-1], traj.controls[:, j]) for j in range(spec.m)],
                      title=f"expert, system {sid}, run {k}", xlabel="t [s]")
        log.info("system %s: horizons %s", sid, horizons)
        entries.append({"id": sid, "files": files, "N_inf": horizons, "spec": spec_to_dict(spec)})
    _update_manifest(out, "gen_expert", {"experiment": cfg["experiment"], "seed": cfg["seed"],
                                         "steps": T, "systems": entries})
    print(f"wrote {sum(len(e['files']) for e in entries)} expert trajectories to {d}")
    return EXIT_OK


def _expert_manifest(out):
    path = Path(out) / "manifest.json"
    if not path.exists() or "gen_expert" not in read_json(path):
        raise ConfigError(f"no expert dataset under {out}; run gen-expert first")
    return read_json(path)["gen_expert"]


def _init_spec(cfg, truth, N, run_seed):
    rule, scale = cfg["learn"]["init"], float(cfg["learn"]["init_scale"])
    if rule == "perturb-A":
        return perturb_A(truth, N, run_seed, scale)
    if rule == "random-diag":
        return random_diag_costs(truth, N, run_seed, scale)
    if rule == "none":
        return infinite_horizon(truth, N=N)
    raise ConfigError(f"unknown learn.init {rule!r}")


def cmd_train(cfg, out, force):
    man = _expert_manifest(out)
    d = _prepare(out, "train", force)
    lc = cfg["learn"]
    runs = []
    for entry in man["systems"]:
        truth = infinite_horizon(spec_from_dict(entry["spec"]))
        batch = [read_trajectory(Path(out) / "expert" / f) for f in entry["files"]]
        for N in lc["horizons"]:
            run_seed = (cfg["seed"], entry["id"], N)
            learnable = tuple(lc["learnable"])
            reference = {k: truth.values()[k] for k in learnable if k in ("A", "B", "Q", "R")}
            conf = TrainConfig(learnable=learnable, structure=dict(lc["structure"]), beta=float(lc["beta"]),
                               epochs=int(lc["epochs"]), N=int(N), adam=AdamHyper(lr=float(lc["lr"])),
                               reference=reference)
            init = _init_spec(cfg, truth, N, run_seed)
            final, rec = train(conf, batch, init)
            stem = f"system_{entry['id']}_N{N}"
            write_train_record(d / f"{stem}.csv", rec)
            write_json(d / f"{stem}.json", spec_to_dict(replace(final, N=N)))
            it = np.arange(len(rec.imitation_loss))
            _save_svg(d / f"{stem}.svg", [("imitation", it, rec.imitation_loss),
                                         ("reference", it, rec.reference_loss)],
                      title=f"system {entry['id']}, N={N}", xlabel="iteration", logy=True)
            runs.append({"system": entry["id"], "N": N, "seed": list(run_seed), "checkpoint": f"{stem}.json",
                         "final_loss": rec.imitation_loss[-1] if rec.imitation_loss else None,
                         "halted": rec.halted})
            print(f"{stem}: loss {rec.imitation_loss[0]:.4g} -> {rec.imitation_loss[-1]:.4g}"
                  + (f" (halted: {rec.halted})" if rec.halted else ""))
    _update_manifest(out, "train", {"seed": cfg["seed"], "learn": lc, "runs": runs})
    return EXIT_OK


def _checkpoints(out, checkpoint):
    if checkpoint:
        return [Path(checkpoint)]
    found = sorted((Path(out) / "train").glob("system_*_N*.json"))
    if not found:
        raise ConfigError("no checkpoints; run train first or pass --checkpoint")
    return found


def _truth_for(out, path):
    sid = int(Path(path).stem.split("_")[1])
    for entry in _expert_manifest(out)["systems"]:
        if entry["id"] == sid:
            return infinite_horizon(spec_from_dict(entry["spec"]))
    raise ConfigError(f"checkpoint {path} does not match any expert system")


def cmd_simulate(cfg, out, force, checkpoint=None):
    d = _prepare(out, "simulate", force)
    T = steps(cfg, "simulate")
    for path in _checkpoints(out, checkpoint):
        learned = infinite_horizon(spec_from_dict(read_json(path)))
        truth = _truth_for(out, path)
        if cfg["simulate"]["x0"] is not None:
            x0 = np.array(cfg["simulate"]["x0"], float)
        else:
            x0 = initial_states(cfg, seed_offset=1)[0]
        traj = simulate_closed_loop(learned, x0, T, plant=truth.system)
        stem = Path(path).stem
        write_trajectory(d / f"{stem}.csv", traj)
        write_prediction_errors(d / f"{stem}_prediction_errors.csv", traj)
        t = np.arange(traj.states.shape[0]) * traj.dt
        bands = [(f"x_{i} bound", b) for i, b in enumerate(np.r_[truth.x_lb.ravel(), truth.x_ub.ravel()] )
                 if abs(b) < C.INF_THRESHOLD][:4]
        _save_svg(d / f"{stem}.svg", [(f"x_{i}", t, traj.states[:, i]) for i in range(truth.n)],
                  title=f"learned closed loop, {stem}", xlabel="t [s]", bands=bands)
        lo = truth.x_lb.ravel()
        worst = float(np.max(lo - traj.states, initial=-np.inf)) if np.any(lo > -C.INF_THRESHOLD) else None
        print(f"{stem}: final |x| {np.linalg.norm(traj.states[-1]):.3g}"
              + (f", worst lower-bound violation {worst:.3g}" if worst is not None else ""))
    return EXIT_OK


def cmd_verify_horizon(cfg, out, force, checkpoint=None):
    d = _prepare(out, "horizon", force)
    h = cfg["horizon"]
    results = []
    for path in _checkpoints(out, checkpoint):
        spec = spec_from_dict(read_json(path))
        lower = h["lower"] if h["lower"] is not None else -np.ones(spec.n)
        upper = h["upper"] if h["upper"] is not None else np.ones(spec.n)
        q = HorizonQuery(spec.N, lower, upper, float(h["eps"]), int(h["n_s"]), float(h["eta"]),
                         cfg["seed"], int(h["max_shrinks"]))
        res = verify_reduce(spec, q)
        write_horizon_report(d / f"{Path(path).stem}.csv", res)
        msg = (f"accepted N={res.N_bar} on box scale {res.scale:g}" if res.accepted
               else f"failed; retrain with N={res.suggestion}")
        print(f"{Path(path).stem}: {msg}")
        results.append({"checkpoint": Path(path).name, "accepted": res.accepted, "N": res.N_bar,
                        "scale": res.scale})
    _update_manifest(out, "verify_horizon", {"query": h, "seed": cfg["seed"], "results": results})
    return EXIT_OK


def cmd_gradcheck(cfg, out, force, mutate=None):
    g = cfg["gradcheck"]
    errs = gc.run_all(cfg["seed"], int(g["systems"]), int(g["qps"]), mutate or g["mutate"])
    ok = True
    for k, v in errs.items():
        passed = v <= gc.TOLERANCES[k]
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {k}: max rel. err. {v:.3e} (tol {gc.TOLERANCES[k]:g})")
    return EXIT_OK if ok else EXIT_CHECK


def _common_options(top):
    # subcommands accept the same flags; their defaults must not mask values given before the command
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="YAML experiment configuration")
    common.add_argument("--out", default=d("runs"), help="output directory (default: runs)")
    common.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    common.add_argument("--force", action="store_true", default=d(False), help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser():
    common = _common_options(False)
    parser = argparse.ArgumentParser(
        prog="ihmpc", parents=[_common_options(True)], description="Infinite-horizon MPC imitation learning experiments.",
        epilog=HELP_TABLE, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-expert", parents=[common], help="simulate the expert controller")
    sub.add_parser("train", parents=[common], help="learn MPC parameters from the expert data")
    for name, text in (("simulate", "closed-loop run of learned controllers"),
                       ("verify-horizon", "sampling-based horizon reduction")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="parameter file (default: all under OUT/train)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference derivative checks")
    p.add_argument("--mutate", choices=gc.MUTATIONS, help="inject a known bug; the check must fail")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        cmd = args.command
        if cmd == "gen-expert":
            return cmd_gen_expert(cfg, args.out, args.force)
        if cmd == "train":
            return cmd_train(cfg, args.out, args.force)
        if cmd == "simulate":
            return cmd_simulate(cfg, args.out, args.force, args.checkpoint)
        if cmd == "verify-horizon":
            return cmd_verify_horizon(cfg, args.out, args.force, args.checkpoint)
        return cmd_gradcheck(cfg, args.out, args.force, args.mutate)
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
