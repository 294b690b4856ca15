"""Terminal selection and the grasp / control / mate-or-release installation loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from dlon import mpc, sim
from dlon.models import CompositeModel
from dlon.scenario import Scenario
from dlon.se2 import Pose2, d_beta, normalize_angles
from dlon.topology import DlonTopology

MAX_RETRIES = 2
SETTLE_S = 1.0


def worst_margin(y: sim.Output, scenario: Scenario, terminal: int) -> float:
    """Largest obstacle margin ``r_to - |rho_t - rho_o|`` of one terminal; ``-inf`` without obstacles."""
    m = sim.obstacle_margins(y, scenario, terminal)
    return float(m.max()) if m.size else -math.inf


def select_terminal(y: sim.Output, scenario: Scenario):
    """Free terminal closest to violating its clearance, among those that are graspable.

    A candidate must be free, have a receptacle, sit inside W and keep every
    obstacle margin strictly negative. The preferred one has the largest
    worst margin; ties go to the lowest id. Returns ``None`` when nothing qualifies.
    """
    best, best_w = None, -math.inf
    for t in y.free_terminals():
        if t >= len(scenario.receptacles):
            continue
        x, yy = y.poses[t, 0], y.poses[t, 1]
        if not scenario.contains(x, yy):
            continue
        w = worst_margin(y, scenario, t)
        if not w < 0.0:
            continue
        if best is None or w > best_w:
            best, best_w = t, w
    return best


@dataclass(frozen=True)
class ModelConfig:
    """``kind`` is ``composite`` (adaptive blend) or ``rigid`` (alpha pinned at 1)."""

    kind: str = "composite"
    gamma: float = 0.98
    capacity: int = 30
    mu: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("composite", "rigid"):
            raise ValueError(f"unknown model kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TmRecord:
    held_terminal: int
    steps_used: int
    goal_reached: bool
    max_c: float = None
    final_c: float = None
    final_d_beta: float = None
    solver_status: dict = field(default_factory=dict)


@dataclass
class InstallReport:
    records: list = field(default_factory=list)
    success: bool = False
    wall_time: float = 0.0
    reason: str = ""
    final_state: sim.SimState = None
    trace: list = field(default_factory=list)

    @property
    def max_c(self):
        vals = [r.max_c for r in self.records if r.max_c is not None]
        return max(vals) if vals else None

    @property
    def final_c(self):
        """Worst of the per-TM final margins."""
        vals = [r.final_c for r in self.records if r.final_c is not None]
        return max(vals) if vals else None

    def to_dict(self) -> dict:
        return dict(
            success=self.success,
            reason=self.reason,
            max_c=self.max_c,
            final_c=self.final_c,
            records=[dict(held_terminal=r.held_terminal, steps_used=r.steps_used, goal_reached=r.goal_reached,
                          max_c=r.max_c, final_c=r.final_c, final_d_beta=r.final_d_beta,
                          solver_status=dict(sorted(r.solver_status.items())))
                     for r in self.records],
        )


def free_margin(y: sim.Output, scenario: Scenario):
    """max c(y) over free terminals, or ``None`` if none is free."""
    free = y.free_terminals()
    if not free:
        return None
    return float(sim.check_constraints(y, scenario, terminals=free).max())


class _EventLog:
    def __init__(self, path, n_t: int):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", newline="")
            self.w = csv.writer(self.fh, lineterminator="\n")
            cols = ["time_s", "tm", "step", "held", "alpha", "u_vx", "u_vy", "u_omega", "d_beta", "c_max"]
            for i in range(n_t):
                cols += [f"t{i}_x", f"t{i}_y", f"t{i}_theta"]
            self.w.writerow(cols)

    def write(self, t, tm, step, held, alpha, u, dist, c, y):
        if self.fh is None:
            return
        c = "" if c is None else repr(float(c))
        self.w.writerow([f"{t:.6f}", tm, step, held, repr(float(alpha)), *(repr(float(v)) for v in u),
                         repr(float(dist)), c, *(repr(float(v)) for v in y.reshape(-1))])

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _control_step(state: sim.SimState, topo: DlonTopology, u: np.ndarray, dt: float) -> sim.SimState:
    n = int(round(dt * sim.SIM_RATE))
    if state.root != state.held:
        state = sim.reroot(state, topo, state.held)
    return sim._rollout(state, topo, u, 1.0 / sim.SIM_RATE, n)[3]


def install_dlon(state: sim.SimState, topo: DlonTopology, scenario: Scenario, mpc_cfg: mpc.MpcConfig = None,
                 model_cfg: ModelConfig = None, log_path=None, settle_s: float = SETTLE_S,
                 max_retries: int = MAX_RETRIES, keep_trace: bool = False) -> InstallReport:
    """Select, grasp and drive terminals to their goals until none is left or selection fails."""
    mpc_cfg = mpc_cfg or mpc.MpcConfig()
    model_cfg = model_cfg or ModelConfig()
    t_start = time.perf_counter()
    n_t = topo.n_terminals
    goals = scenario.goals()
    dt = mpc_cfg.dt
    report = InstallReport()
    log = _EventLog(log_path, n_t)
    failures = [0] * n_t
    clock = 0.0
    model = CompositeModel(0, n_t, gamma=model_cfg.gamma, capacity=model_cfg.capacity, mu=model_cfg.mu,
                           adaptive=model_cfg.kind == "composite")
    try:
        while True:
            y = sim.observe(state, topo)
            th = select_terminal(y, scenario)
            if th is None:
                break
            state = sim.grasp(state, topo, scenario, th)
            model.reset(th)
            rec = TmRecord(th, 0, False)
            warm, u_prev = None, np.zeros(3)
            goal = goals[th]
            for k in range(mpc_cfg.max_tm_steps + 1):
                y = sim.observe(state, topo)
                c = free_margin(y, scenario)
                if c is not None:
                    rec.max_c = c if rec.max_c is None else max(rec.max_c, c)
                    rec.final_c = c
                dist = d_beta(y.pose(th), goal, mpc_cfg.beta)
                rec.final_d_beta = float(dist)
                if mpc.goal_reached(y.pose(th), goal, mpc_cfg) or k == mpc_cfg.max_tm_steps:
                    log.write(clock, len(report.records), k, th, model.alpha, np.zeros(3), dist, c, y.poses)
                    break
                model.fit()
                sol = mpc.solve(y, model, goal, scenario, mpc_cfg, warm, u_prev)
                rec.solver_status[sol.status] = rec.solver_status.get(sol.status, 0) + 1
                u = sol.u0.copy()
                log.write(clock, len(report.records), k, th, model.alpha, u, dist, c, y.poses)
                if keep_trace:
                    report.trace.append((clock, th, y.poses.copy(), u))
                state = _control_step(state, topo, u, dt)
                clock += dt
                y_next = sim.observe(state, topo)
                ydot = (y_next.poses - y.poses) / dt
                ydot[:, 2] = normalize_angles(y_next.poses[:, 2] - y.poses[:, 2]) / dt
                model.discount()
                model.push(ydot.reshape(-1), u)
                warm, u_prev = sol, u
                rec.steps_used = k + 1
            rec.goal_reached = mpc.goal_reached(sim.observe(state, topo).pose(th), goal, mpc_cfg)
            report.records.append(rec)
            if rec.goal_reached:
                state = sim.mate(state, topo, th, goal, mpc_cfg.beta, mpc_cfg.eps_g)
            else:
                state = sim.release(state)
                failures[th] += 1
            if settle_s > 0:
                state = sim.settle(state, topo, settle_s)
                clock += settle_s
            if failures[th] > max_retries:
                report.reason = f"terminal {th} failed {failures[th]} times"
                break
    finally:
        log.close()
    report.final_state = state
    report.success = all(s == sim.MATED for s in state.status)
    if not report.reason:
        report.reason = "installed" if report.success else "no feasible terminal manipulation remaining"
    report.wall_time = time.perf_counter() - t_start
    return report
