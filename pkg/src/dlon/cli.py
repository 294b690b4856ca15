"""Command-line entry point: ``dlon {simulate,collect,sysid,eval-models,install,bench}``.

Exit codes: 0 success, 2 install failure, 3 infeasible scenario or bad config, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import tomli

from dlon import config, dataset, models, planner, plots, sim, sysid
from dlon.config import ConfigError
from dlon.se2 import Pose2

log = logging.getLogger("dlon")

EXIT_OK = 0
EXIT_INSTALL_FAILED = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

COMMANDS = ("simulate", "collect", "sysid", "eval-models", "install", "bench")
MODEL_KINDS = ("composite", "rigid")


class MissingDataset(dataset.DatasetError):
    pass


class InfeasibleScenario(RuntimeError):
    pass


# ---------------------------------------------------------------- plumbing

@contextmanager
def atomic_dir(out):
    """Build the output in a sibling temp dir and swap it into place on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        old = out.parent / f".{out.name}.old.{os.getpid()}"
        os.replace(out, old)
        os.replace(tmp, out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, out)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Pose2):
        return [o.x, o.y, o.theta]
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in r])
    return path


def _fmt(v, spec=".4f"):
    return "n/a" if v is None else format(v, spec)


def perturbed_scenario(scenario, seed: int):
    """Seed 0 is the nominal start; other seeds shift the start by up to 1 cm and 0.05 rad."""
    if seed == 0:
        return scenario
    rng = np.random.default_rng([seed, 7])
    d = rng.uniform([-0.01, -0.01, -0.05], [0.01, 0.01, 0.05])
    p = scenario.initial_pose
    return replace(scenario, initial_pose=Pose2(p.x + d[0], p.y + d[1], p.theta + d[2]))


def load_experiment(args):
    return config.load_config(args.scenario, args.override or ())


def require_dataset(path) -> dataset.Dataset:
    path = Path(path)
    if not (path / "meta.json").exists():
        raise MissingDataset(f"no dataset at {path}; run `dlon collect --out {path}` first")
    ds = dataset.load_dataset(path)
    if len(ds) == 0 or ds.n_samples == 0:
        raise MissingDataset(f"dataset at {path} has no samples")
    return ds


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    """One constant-twist rollout with terminal 0 held; trajectory CSV and snapshot SVG."""
    exp = load_experiment(args)
    topo, sc = exp.topology, perturbed_scenario(exp.scenario, args.seed)
    rng = np.random.default_rng(args.seed)
    u = dataset.sample_input(rng)
    state = sim.initial_state(topo, sc.initial_pose, sc.initial_angles)
    state = sim.grasp(state, topo, sc, 0)
    rate = sim.SIM_RATE
    n = int(round(args.duration * rate))
    roots, qs, ys, final = sim._rollout(state, topo, u, 1.0 / rate, n)
    step = int(rate // dataset.CONTROL_RATE)
    with atomic_dir(args.out) as tmp:
        n_t = topo.n_terminals
        header = ["time_s"] + [f"t{i}_{c}" for i in range(n_t) for c in ("x_m", "y_m", "theta_rad")] + ["seed"]
        rows = [[k / rate, *ys[k].reshape(-1), args.seed] for k in range(0, n, step)]
        write_csv(tmp / "trajectory.csv", header, rows)
        write_json(tmp / "simulate.json", dict(seed=args.seed, scenario=exp.name, u=u.tolist(), duration_s=args.duration,
                                              final_y=sim.observe(final, topo).poses.tolist()))
        traces = {t: ys[::step, t, :2] for t in range(n_t)}
        plots.write(tmp / "snapshot.svg", plots.scenario_svg(sc, sim.geometry(final, topo), traces,
                                                             f"{exp.name}: constant twist, seed {args.seed}"))
    print(f"simulated {args.duration:g} s with u = {np.round(u, 4).tolist()} -> {args.out}")
    return EXIT_OK


def cmd_collect(args) -> int:
    exp = load_experiment(args)
    opts = dict(exp.collection)
    n = args.trajectories if args.trajectories is not None else int(opts.pop("n_trajectories", 100))
    opts.pop("n_trajectories", None)
    if "u_bounds" in opts:
        opts["u_bounds"] = tuple(tuple(b) for b in opts["u_bounds"])
    t0 = time.perf_counter()
    ds = dataset.build_dataset(exp.topology, n, seed=args.seed, **opts)
    with atomic_dir(args.out) as tmp:
        dataset.save_dataset(ds, tmp)
    print(f"collected {len(ds)} trajectories x {ds.n_samples} samples in {time.perf_counter() - t0:.1f} s -> {args.out}")
    return EXIT_OK


def _r2_rows(r2: dict, label: str):
    rows = [[label, "mean", "translational", r2["translational"]], [label, "mean", "rotational", r2["rotational"]]]
    return rows


def cmd_sysid(args) -> int:
    ds = require_dataset(args.dataset)
    held = int(ds.meta.get("held", 0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", sysid.RankDeficient)
        model, report = sysid.fit_sindy(ds)
    dec = sysid.decompose_rigid_residual(model, held)
    r2_rb = sysid.rigid_r_squared(ds, held)
    y, u, yd = sysid._stack(ds.trajectories)
    n_t = y.shape[1] // 3
    free = [t for t in range(n_t) if t != held]
    r2_sp = sysid.r_squared(model.predict(y, u).reshape(-1, n_t, 3)[:, free], yd.reshape(-1, n_t, 3)[:, free])
    r2_sparse = dict(translational=float(r2_sp[:, :2].mean()), rotational=float(r2_sp[:, 2].mean()))
    eqs = model.equations()
    with atomic_dir(args.out) as tmp:
        sysid.save_model(model, tmp / "model.tsv")
        (tmp / "equations.txt").write_text(eqs + "\n")
        write_csv(tmp / "r2.csv", ["model", "statistic", "channel", "r2", "seed"],
                  [r + [ds.meta.get("seed")] for r in _r2_rows(r2_rb, "rigid_body") + _r2_rows(r2_sparse, "sparse")])
        write_json(tmp / "sysid.json", dict(
            seed=ds.meta.get("seed"), dataset=str(args.dataset), chosen=report["chosen"], grid=report["grid"],
            n_terms=model.n_terms, one_step=report["one_step"], rigid_gains=dec.gains.tolist(),
            gains_positive=dec.positive, residual_terms=dec.residual.n_terms,
            r2_rigid_body=dict(translational=r2_rb["translational"], rotational=r2_rb["rotational"]),
            r2_sparse=r2_sparse, warnings=[str(w.message) for w in caught],
        ))
    print(eqs)
    print()
    print(f"lambda = {report['chosen']['lam']:.4g}, threshold = {report['chosen']['threshold']:.4g}, "
          f"{model.n_terms} terms; residual keeps {dec.residual.n_terms}")
    print("rigid gains C_dd: " + " ".join(f"{g:.3f}" for g in dec.gains))
    print(f"{'model':<12}{'R2 trans':>10}{'R2 rot':>10}")
    print(f"{'rigid body':<12}{r2_rb['translational']:>10.3f}{r2_rb['rotational']:>10.3f}")
    print(f"{'sparse':<12}{r2_sparse['translational']:>10.3f}{r2_sparse['rotational']:>10.3f}")
    return EXIT_OK


def cmd_eval_models(args) -> int:
    exp = load_experiment(args)
    ds = require_dataset(args.dataset)
    table = models.evaluate_models(ds, gamma=exp.model.gamma, mu=exp.model.mu, held=int(ds.meta.get("held", 0)))
    seed = ds.meta.get("seed")
    names = ("rigid", "ls", "composite")
    with atomic_dir(args.out) as tmp:
        write_csv(tmp / "model_errors.csv", ["model", "max_trans_error_mean_m", "max_rot_error_mean_rad"],
                  [[n, table[n]["trans_mean"], table[n]["rot_mean"]] for n in names])
        write_json(tmp / "model_errors.json", dict(seed=seed, gamma=exp.model.gamma, mu=exp.model.mu, table=table))
        series = {}
        for n in names:
            e = np.sort(np.array(table[n]["per_trajectory"])[:, 0])
            series[n] = (np.arange(len(e)), e)
        plots.write(tmp / "max_errors.svg", plots.line_svg(series, "trajectory (sorted)", "max translational error [m]",
                                                          f"open-loop prediction error, dataset seed {seed}"))
    print(f"{'model':<10}{'trans [m]':>12}{'rot [rad]':>12}")
    for n in names:
        print(f"{n:<10}{table[n]['trans_mean']:>12.4f}{table[n]['rot_mean']:>12.4f}")
    return EXIT_OK


def run_install(exp, kind: str, seed: int, out=None, keep_trace: bool = False):
    """One installation; returns (report, scenario, topology). Raises InfeasibleScenario if nothing can start."""
    sc = perturbed_scenario(exp.scenario, seed)
    topo = exp.topology
    state = sim.initial_state(topo, sc.initial_pose, sc.initial_angles)
    if planner.select_terminal(sim.observe(state, topo), sc) is None:
        raise InfeasibleScenario(f"no terminal of scenario {exp.name!r} can be selected at the start")
    mcfg = replace(exp.model, kind=kind)
    log_path = None if out is None else Path(out) / "events.csv"
    report = planner.install_dlon(state, topo, sc, exp.controller, mcfg, log_path=log_path, keep_trace=keep_trace)
    return report, sc, topo


def install_row(name, kind, seed, report):
    return [name, kind, seed, int(report.success), len(report.records), report.max_c, report.final_c, report.reason]


INSTALL_HEADER = ["scenario", "model", "seed", "success", "n_tm", "max_c_m", "final_c_m", "reason"]


def cmd_install(args) -> int:
    exp = load_experiment(args)
    kind = args.model or exp.model.kind
    with atomic_dir(args.out) as tmp:
        report, sc, topo = run_install(exp, kind, args.seed, tmp, keep_trace=True)
        write_csv(tmp / "install_metrics.csv", INSTALL_HEADER, [install_row(exp.name, kind, args.seed, report)])
        write_json(tmp / "report.json", dict(scenario=exp.name, model=kind, seed=args.seed,
                                             controller=exp.controller.to_dict(), **report.to_dict()))
        initial = sim.initial_state(topo, sc.initial_pose, sc.initial_angles)
        traces = {}
        for _, th, poses, _ in report.trace:
            for t in range(topo.n_terminals):
                traces.setdefault(t, []).append(poses[t, :2])
        plots.write(tmp / "initial.svg", plots.scenario_svg(sc, sim.geometry(initial, topo), None,
                                                            f"{exp.name}: initial configuration"))
        plots.write(tmp / "final.svg", plots.scenario_svg(sc, sim.geometry(report.final_state, topo), traces,
                                                          f"{exp.name} / {kind}: {report.reason}"))
        times = np.array([tr[0] for tr in report.trace])
        c = []
        for _, _, poses, _ in report.trace:
            y = sim.Output(poses, [sim.FREE] * topo.n_terminals)
            c.append(float(sim.check_constraints(y, sc).max()))
        plots.write(tmp / "margin.svg", plots.line_svg({"max c(y)": (times, np.array(c))}, "time [s]", "margin [m]",
                                                       f"{exp.name} / {kind}", hline=0.0))
    print(f"{exp.name} / {kind}: {'success' if report.success else 'FAILED'} ({report.reason}) in {report.wall_time:.1f} s")
    for i, r in enumerate(report.records):
        print(f"  TM {i}: terminal {r.held_terminal}, {r.steps_used} steps, goal {'reached' if r.goal_reached else 'missed'}, "
              f"max c {_fmt(r.max_c)}, final c {_fmt(r.final_c)}")
    print(f"  max c {_fmt(report.max_c)} m, final c {_fmt(report.final_c)} m")
    return EXIT_OK if report.success else EXIT_INSTALL_FAILED


def _bench_job(job):
    scenario, overrides, kind, seed = job
    exp = config.load_config(scenario, overrides)
    try:
        report, _, _ = run_install(exp, kind, seed)
    except InfeasibleScenario as e:
        return dict(scenario=exp.name, model=kind, seed=seed, success=False, infeasible=True, reason=str(e),
                    max_c=None, final_c=None, records=[])
    return dict(scenario=exp.name, model=kind, seed=seed, infeasible=False, **report.to_dict())


def bench_jobs(scenarios, kinds, seed: int, k: int, overrides=()):
    return [(s, tuple(overrides), m, seed + i) for s in scenarios for m in kinds for i in range(k)]


def cmd_bench(args) -> int:
    scenarios = args.scenarios or list(config.BUILTIN)
    kinds = [args.model] if args.model else list(MODEL_KINDS)
    jobs = bench_jobs(scenarios, kinds, args.seed, args.k, args.override or ())
    for s in scenarios:
        config.load_config(s, args.override or ())
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_bench_job, jobs))
    else:
        results = [_bench_job(j) for j in jobs]
    agg = []
    for s in dict.fromkeys(r["scenario"] for r in results):
        for m in kinds:
            rs = [r for r in results if r["scenario"] == s and r["model"] == m]
            done = [r for r in rs if r["success"]]
            agg.append(dict(scenario=s, model=m, runs=len(rs), successes=len(done),
                            success_rate=len(done) / len(rs) if rs else 0.0,
                            worst_max_c=max((r["max_c"] for r in done), default=None),
                            worst_final_c=max((r["final_c"] for r in done), default=None)))
    with atomic_dir(args.out) as tmp:
        write_csv(tmp / "runs.csv", INSTALL_HEADER,
                  [[r["scenario"], r["model"], r["seed"], int(r["success"]), len(r["records"]), r["max_c"], r["final_c"],
                    r["reason"]] for r in results])
        write_csv(tmp / "summary.csv", ["scenario", "model", "runs", "successes", "success_rate", "worst_max_c_m",
                                        "worst_final_c_m", "seed"],
                  [[a["scenario"], a["model"], a["runs"], a["successes"], a["success_rate"], a["worst_max_c"],
                    a["worst_final_c"], args.seed] for a in agg])
        write_json(tmp / "bench.json", dict(seed=args.seed, k=args.k, scenarios=scenarios, models=kinds,
                                            overrides=list(args.override or ()), summary=agg, runs=results))
    print(f"{'scenario':<11}{'model':<11}{'success':>9}{'max c [m]':>12}{'final c [m]':>13}")
    for a in agg:
        print(f"{a['scenario']:<11}{a['model']:<11}{a['successes']:>5}/{a['runs']:<3}"
              f"{_fmt(a['worst_max_c']):>12}{_fmt(a['worst_final_c']):>13}")
    failed = [a for a in agg if a["successes"] < a["runs"]]
    for a in failed:
        print(f"FAILED: {a['scenario']} / {a['model']} ({a['runs'] - a['successes']} of {a['runs']} runs)")
    return EXIT_INSTALL_FAILED if failed else EXIT_OK


HANDLERS = {"simulate": cmd_simulate, "collect": cmd_collect, "sysid": cmd_sysid, "eval-models": cmd_eval_models,
            "install": cmd_install, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    default_out = {"simulate": "runs/simulate", "collect": "runs/dataset", "sysid": "runs/sysid",
                   "eval-models": "runs/eval-models", "install": "runs/install", "bench": "runs/bench"}
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--scenario", default="easy", help="built-in name or path to a scenario TOML")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", type=Path, default=Path(default_out[name]))
        s.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="TOML value for a dotted key, e.g. controller.beta=0.02")
        if name in ("install", "bench"):
            s.add_argument("--model", choices=MODEL_KINDS, default=None)
        if name == "collect":
            s.add_argument("--trajectories", type=int, default=None)
        if name in ("sysid", "eval-models"):
            s.add_argument("--dataset", type=Path, default=Path("runs/dataset"))
        if name == "simulate":
            s.add_argument("--duration", type=float, default=5.0, help="seconds")
        if name == "bench":
            s.add_argument("--k", type=int, default=1, help="seeds per scenario and model")
            s.add_argument("--scenarios", nargs="+", default=None)
            s.add_argument("--workers", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "trajectories", None) is not None and args.trajectories < 1:
        print("error: --trajectories must be >= 1", file=sys.stderr)
        return EXIT_INFEASIBLE
    try:
        return HANDLERS[args.command](args)
    except (MissingDataset, FileNotFoundError, OSError, tomli.TOMLDecodeError, dataset.SchemaMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (InfeasibleScenario, ConfigError, sim.GraspInfeasible, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
