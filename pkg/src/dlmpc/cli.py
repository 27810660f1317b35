"""Experiment harness: instance generation, closed-loop runs, benchmarks.

Subcommands
-----------
generate   write a random grid instance (model + constraint spec) to disk
run        closed-loop simulation for a configured noise case / controller
benchmark  runtime scaling sweep over exactly one of {N, d, T}
check      localizability + oracle-equivalence smoke test

Configuration is a flat key=value text file ('#' starts a comment).  Keys:

    rows, cols      grid shape                      (default 4, 4)
    p_connect       mesh link probability           (default 0.4)
    dt              discretization step             (default 0.2)
    d               locality radius                 (default 3)
    T               prediction horizon              (default 5)
    rho             consensus penalty               (default 1.0)
    eps_p, eps_d    stopping tolerances             (default 1e-4)
    max_iter        iteration budget                (default 5000)
    noise           zero | local | polytopic | adversarial   (default zero)
    sigma           disturbance size                (default 0.1)
    x_max, u_max    box bounds                      (default 1.2, 3.0)
    seed            instance seed                   (default 0)
    noise_seed      disturbance stream seed         (default seed + 1)
    x0_seed         initial-condition seed          (default seed + 2)
    x0_scale        uniform initial-condition scale (default 0.4)
    controller      dlmpc | oracle | both, optionally suffixed _nominal /
                    _robust (default dlmpc; suffix defaults to _robust
                    whenever noise != zero)
    steps           closed-loop length              (default 20)
    warm_start      0 | 1                           (default 1)
    workers         worker threads per solve        (default 1)
    sweep, values   benchmark parameter and comma list of its values
    bench_iters     consensus iterations measured per benchmark solve
    bench_seeds     seeds per benchmark point       (default 5)

Exit codes: 0 ok, 2 config error, 3 solver error, 4 infeasible problem.
"""

import argparse
import os
import sys

import numpy as np

from .admm import AdmmConfig, DlmpcSolver, check_localizability
from .constraints import (LocalNormBound, QuadraticCost, box_constraints,
                          box_polytope)
from .errors import InfeasibleError, SolverError
from .io import (read_model, read_spec, write_benchmark_csv, write_model,
                 write_spec, write_telemetry_csv, write_trajectory_csv)
from .model import d_sets_from_model, generate_power_grid, locality_masks
from .netsim import SimTransport, noise_gen, run_closed_loop

DEFAULTS = {
    "rows": 4, "cols": 4, "p_connect": 0.4, "dt": 0.2,
    "d": 3, "T": 5,
    "rho": 1.0, "eps_p": 1e-4, "eps_d": 1e-4, "max_iter": 5000,
    "noise": "zero", "sigma": 0.1,
    "x_max": 1.2, "u_max": 3.0,
    "seed": 0, "noise_seed": None, "x0_seed": None, "x0_scale": 0.4,
    "controller": "dlmpc", "steps": 20,
    "warm_start": 1, "workers": 1,
    "sweep": None, "values": None, "bench_iters": 12, "bench_seeds": 5,
}

_INT_KEYS = {"rows", "cols", "d", "T", "seed", "noise_seed", "x0_seed",
             "steps", "warm_start", "workers", "max_iter", "bench_iters",
             "bench_seeds"}
_FLOAT_KEYS = {"p_connect", "dt", "rho", "eps_p", "eps_d", "sigma",
               "x_max", "u_max", "x0_scale"}


class ConfigError(Exception):
    pass


def parse_config(path=None, overrides=()):
    """Flat key=value config with defaults; unknown keys are fatal."""
    cfg = dict(DEFAULTS)
    pairs = []
    if path:
        try:
            with open(path) as fh:
                for ln in fh:
                    ln = ln.split("#", 1)[0].strip()
                    if not ln:
                        continue
                    if "=" not in ln:
                        raise ConfigError(f"malformed config line: {ln!r}")
                    key, val = ln.split("=", 1)
                    pairs.append((key.strip(), val.strip()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"malformed override: {item!r}")
        key, val = item.split("=", 1)
        pairs.append((key.strip(), val.strip()))
    for key, val in pairs:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        try:
            if key in _INT_KEYS:
                cfg[key] = int(val)
            elif key in _FLOAT_KEYS:
                cfg[key] = float(val)
            else:
                cfg[key] = val
        except ValueError:
            raise ConfigError(f"bad value for {key}: {val!r}") from None
    if cfg["noise_seed"] is None:
        cfg["noise_seed"] = cfg["seed"] + 1
    if cfg["x0_seed"] is None:
        cfg["x0_seed"] = cfg["seed"] + 2
    return cfg


def _build_instance(cfg):
    model = generate_power_grid(cfg["rows"], cfg["cols"], cfg["p_connect"],
                                cfg["dt"], cfg["seed"])
    return model


def _noise_model(cfg, model, robust_kind):
    """The controller-side disturbance model for a robust formulation."""
    if robust_kind == "local":
        return LocalNormBound(p=np.inf, sigma=cfg["sigma"])
    return box_polytope(model, cfg["T"], cfg["sigma"])


def _controller_spec(cfg, model, formulation):
    if formulation == "nominal":
        noise = None
    else:
        kind = "local" if cfg["noise"] == "local" else "poly"
        noise = _noise_model(cfg, model, kind)
    return box_constraints(model, cfg["T"], cfg["x_max"], cfg["u_max"], noise)


def _split_controller(cfg):
    name = cfg["controller"]
    formulation = None
    for suffix in ("_nominal", "_robust"):
        if name.endswith(suffix):
            formulation = suffix[1:]
            name = name[:-len(suffix)]
    if name not in ("dlmpc", "oracle", "both"):
        raise ConfigError(f"unknown controller: {cfg['controller']}")
    if formulation is None:
        formulation = "robust" if cfg["noise"] != "zero" else "nominal"
    return name, formulation


def _admm_config(cfg):
    return AdmmConfig(rho=cfg["rho"], eps_p=cfg["eps_p"], eps_d=cfg["eps_d"],
                      max_iter=cfg["max_iter"], warm_start=bool(cfg["warm_start"]))


def _x0(cfg, model):
    rng = np.random.default_rng(cfg["x0_seed"])
    return rng.uniform(-cfg["x0_scale"], cfg["x0_scale"], model.n)


def cmd_generate(cfg, out_dir):
    model = _build_instance(cfg)
    spec = _controller_spec(cfg, model, _split_controller(cfg)[1])
    os.makedirs(out_dir, exist_ok=True)
    write_model(model, os.path.join(out_dir, "model.txt"))
    write_spec(spec, os.path.join(out_dir, "spec.txt"))
    print(f"instance: N={model.n_subsystems} n={model.n} p={model.p} "
          f"edges={len(model.graph)}")
    print(f"wrote {out_dir}/model.txt and {out_dir}/spec.txt")
    return 0


def _run_one(cfg, model, masks, x0, formulation, noise_stream, audit):
    spec = _controller_spec(cfg, model, formulation)
    admm_cfg = _admm_config(cfg)
    solver = DlmpcSolver(model, spec, masks, admm_cfg, QuadraticCost())
    transport = SimTransport(model, cfg["d"]) if audit else None
    return run_closed_loop(model, spec, masks, x0, admm_cfg, noise_stream,
                           cfg["steps"], QuadraticCost(), transport=transport,
                           solver=solver, workers=cfg["workers"])


def _oracle_loop(cfg, model, masks, x0, formulation, noise_stream):
    from .oracle import solve_centralized
    spec = _controller_spec(cfg, model, formulation)
    n, p = model.n, model.p
    steps = cfg["steps"]
    from .netsim import Trajectory
    traj = Trajectory(x=np.zeros((steps + 1, n)), u=np.zeros((steps, p)),
                      w=np.zeros((steps, n)))
    traj.x[0] = x0
    for tau in range(steps):
        sol = solve_centralized(model, spec, masks, traj.x[tau],
                                QuadraticCost())
        traj.iterations.append(1)
        traj.u[tau] = sol.u0
        traj.w[tau] = noise_stream(tau)
        traj.x[tau + 1] = model.A @ traj.x[tau] + model.B @ traj.u[tau] + traj.w[tau]
    return traj


_NOISE_KIND = {"zero": "zero", "local": "uniform_local",
               "polytopic": "uniform_polytope", "adversarial": "vertex_adversarial"}


def cmd_run(cfg, instance_dir, out_dir):
    if instance_dir:
        model = read_model(os.path.join(instance_dir, "model.txt"))
    else:
        model = _build_instance(cfg)
    sets = d_sets_from_model(model, cfg["d"])
    masks = locality_masks(model, sets, cfg["T"])
    x0 = _x0(cfg, model)
    controller, formulation = _split_controller(cfg)

    if cfg["noise"] not in _NOISE_KIND:
        raise ConfigError(f"unknown noise kind: {cfg['noise']}")
    gen_spec = _controller_spec(
        cfg, model, "nominal" if cfg["noise"] == "zero" else "robust")
    stream = noise_gen(_NOISE_KIND[cfg["noise"]], model, gen_spec,
                       cfg["noise_seed"])

    os.makedirs(out_dir, exist_ok=True)
    trajectories = {}
    if controller in ("dlmpc", "both"):
        trajectories["dlmpc"] = _run_one(cfg, model, masks, x0, formulation,
                                         stream, audit=True)
    if controller in ("oracle", "both"):
        stream2 = noise_gen(_NOISE_KIND[cfg["noise"]], model, gen_spec,
                            cfg["noise_seed"])
        trajectories["oracle"] = _oracle_loop(cfg, model, masks, x0,
                                              formulation, stream2)

    for name, traj in trajectories.items():
        write_trajectory_csv(traj, model, os.path.join(out_dir, f"trajectory_{name}.csv"))
        if traj.telemetry:
            write_telemetry_csv(traj.telemetry,
                                os.path.join(out_dir, f"telemetry_{name}.csv"))
    if controller == "both":
        ta, tb = trajectories["dlmpc"], trajectories["oracle"]
        gaps = np.abs(ta.u - tb.u).max(axis=1)
        import csv as _csv
        with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
            wr = _csv.writer(fh)
            wr.writerow(["tau", "u0_gap"])
            for tau, gap in enumerate(gaps):
                wr.writerow([tau, repr(float(gap))])
        print(f"max u0 gap over {cfg['steps']} steps: {gaps.max():.3e}")
    for name, traj in trajectories.items():
        print(f"{name}: {cfg['steps']} steps, mean iterations "
              f"{np.mean(traj.iterations):.1f}, final |x| "
              f"{np.abs(traj.x[-1]).max():.4f}")
    print(f"wrote CSVs to {out_dir}")
    return 0


def cmd_benchmark(cfg, out_path):
    if cfg["sweep"] not in ("N", "d", "T"):
        raise ConfigError("benchmark needs sweep=N|d|T")
    if not cfg["values"]:
        raise ConfigError("benchmark needs values=<comma list>")
    try:
        values = [int(v) for v in str(cfg["values"]).split(",")]
    except ValueError:
        raise ConfigError(f"bad sweep values: {cfg['values']!r}") from None

    formulation = "robust" if cfg["noise"] != "zero" else "nominal"
    case = "noise_free" if formulation == "nominal" else cfg["noise"]
    rows = []
    for value in values:
        per_state = []
        for seed_off in range(cfg["bench_seeds"]):
            c = dict(cfg)
            c["seed"] = cfg["seed"] + seed_off
            if cfg["sweep"] == "N":
                side = int(round(value ** 0.5))
                if side * side != value:
                    raise ConfigError(f"N value {value} is not a square grid size")
                c["rows"] = c["cols"] = side
            elif cfg["sweep"] == "d":
                c["d"] = value
            else:
                c["T"] = value
            model = _build_instance(c)
            sets = d_sets_from_model(model, c["d"])
            masks = locality_masks(model, sets, c["T"])
            spec = _controller_spec(c, model, formulation)
            admm_cfg = AdmmConfig(rho=c["rho"], eps_p=1e-12, eps_d=1e-12,
                                  max_iter=c["bench_iters"])
            solver = DlmpcSolver(model, spec, masks, admm_cfg, QuadraticCost())
            x0 = _x0(c, model)
            try:
                solver.solve(x0, collect_telemetry=False)
            except SolverError:
                pass            # fixed iteration budget; timing still recorded
            # per-iteration per-state time, warm iterations only
            times = solver.last_subsystem_times
            dims = np.asarray(model.state_dims, dtype=float)
            per_state.append(float(np.mean(times / dims)))
        rows.append((cfg["sweep"], value, case, cfg["bench_seeds"],
                     float(np.mean(per_state)), float(np.std(per_state))))
        print(f"{cfg['sweep']}={value}: {np.mean(per_state):.3e} "
              f"+/- {np.std(per_state):.3e} s/iter/state")
    write_benchmark_csv(rows, out_path)
    print(f"wrote {out_path}")
    return 0


def cmd_check(cfg):
    model = _build_instance(cfg)
    sets = d_sets_from_model(model, cfg["d"])
    masks = locality_masks(model, sets, cfg["T"])
    ok = check_localizability(model, masks, cfg["T"])
    print(f"localizable at d={cfg['d']}: {ok}")
    if not ok:
        return 3
    from .oracle import solve_centralized
    spec = _controller_spec(cfg, model, "nominal")
    x0 = _x0(cfg, model)
    admm_cfg = AdmmConfig(rho=cfg["rho"], eps_p=1e-5, eps_d=1e-5,
                          max_iter=cfg["max_iter"])
    res = DlmpcSolver(model, spec, masks, admm_cfg, QuadraticCost()).solve(x0)
    osol = solve_centralized(model, spec, masks, x0, QuadraticCost())
    gap = abs(res.objective - osol.objective) / max(abs(osol.objective), 1e-12)
    u0g = np.abs(res.u0 - osol.u0).max() / (1.0 + np.abs(osol.u0).max())
    print(f"objective gap vs oracle: {gap:.3e}; u0 gap: {u0g:.3e}")
    ok = gap <= 1e-3 and u0g <= 1e-3
    print("check:", "PASS" if ok else "FAIL")
    return 0 if ok else 3


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dlmpc",
        description="distributed localized MPC: generate / run / benchmark / check")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="config override (repeatable)")

    sp = sub.add_parser("generate", help="write a random instance to disk")
    add_common(sp)
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("run", help="closed-loop simulation")
    add_common(sp)
    sp.add_argument("--instance", help="directory with model.txt (optional)")
    sp.add_argument("--out", required=True, help="output directory for CSVs")

    sp = sub.add_parser("benchmark", help="runtime scaling sweep")
    add_common(sp)
    sp.add_argument("--out", required=True, help="output CSV path")

    sp = sub.add_parser("check", help="localizability + oracle smoke test")
    add_common(sp)

    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, args.set)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "run":
            return cmd_run(cfg, args.instance, args.out)
        if args.command == "benchmark":
            return cmd_benchmark(cfg, args.out)
        return cmd_check(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleError as exc:
        step = f" at time step {exc.time_step}" if exc.time_step is not None else ""
        print(f"infeasible{step}: {exc}", file=sys.stderr)
        return 4
    except SolverError as exc:
        step = f" at time step {exc.time_step}" if exc.time_step is not None else ""
        print(f"solver failure{step}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
