"""Quasi-static planar simulator of a DLO network.

The network lies on a table. The held terminal follows the commanded twist
exactly; every joint angle obeys an overdamped balance between elastic joint
torques, joint damping, viscous table drag on the links and terminal blocks,
and penalty springs pinning mated terminals. Joints carry Coulomb stick-slip
friction and hard angle limits. There is no inertia.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from dlon import _kernel
from dlon.scenario import Scenario
from dlon.se2 import Pose2, Twist2, d_beta, normalize_angle, normalize_angles
from dlon.topology import DlonTopology

FREE, HELD, MATED = "free", "held", "mated"
SIM_RATE = 240.0
EPS_X = 1e-3
EPS_Y = 1e-3


class SimError(RuntimeError):
    pass


class NoHeldTerminal(SimError):
    pass


class GraspInfeasible(SimError):
    pass


class MateNotAtGoal(SimError):
    pass


class NoConvergence(SimError):
    pass


@dataclass(frozen=True, eq=False)
class SimState:
    """Root pose plus canonical joint angles.

    ``root_pose`` is the pose of terminal ``root``; the joint angles do not
    depend on which terminal is the root, so re-rooting only changes these two
    fields.
    """

    root: int
    root_pose: Pose2
    joint_angles: np.ndarray
    status: tuple
    mated_poses: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.array(self.joint_angles, dtype=float)
        q.setflags(write=False)
        object.__setattr__(self, "joint_angles", q)
        object.__setattr__(self, "status", tuple(self.status))
        object.__setattr__(self, "mated_poses", dict(self.mated_poses))
        if sum(s == HELD for s in self.status) > 1:
            raise SimError("at most one terminal can be held")

    @property
    def held(self):
        for i, s in enumerate(self.status):
            if s == HELD:
                return i
        return None

    def vector(self) -> np.ndarray:
        """The state ``x = [root pose, joint angles]``."""
        return np.concatenate([self.root_pose.as_array(), self.joint_angles])


@dataclass(frozen=True, eq=False)
class Output:
    """Stacked terminal poses, one ``(x, y, theta)`` row per terminal, tagged with status."""

    poses: np.ndarray
    status: tuple

    def __post_init__(self):
        p = np.array(self.poses, dtype=float).reshape(-1, 3)
        p.setflags(write=False)
        object.__setattr__(self, "poses", p)
        object.__setattr__(self, "status", tuple(self.status))

    @property
    def n_terminals(self) -> int:
        return self.poses.shape[0]

    @property
    def held(self):
        for i, s in enumerate(self.status):
            if s == HELD:
                return i
        return None

    def pose(self, i: int) -> Pose2:
        return Pose2.from_array(self.poses[i])

    def flat(self) -> np.ndarray:
        return self.poses.reshape(-1).copy()

    def free_terminals(self) -> list:
        return [i for i, s in enumerate(self.status) if s == FREE]


@dataclass
class Geometry:
    heading: np.ndarray      # (L,) world heading of each link
    prox: np.ndarray         # (L, 2) proximal node
    distal: np.ndarray       # (L, 2) distal node
    terminal_poses: np.ndarray  # (n_t, 3)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.prox + self.distal)


def initial_state(topo: DlonTopology, pose0: Pose2 = Pose2(0, 0, 0), angles=None,
                  status=None) -> SimState:
    """Network at rest with terminal 0 at ``pose0``."""
    q = topo.rest_angles.copy() if angles is None or len(angles) == 0 else np.asarray(angles, float)
    if status is None:
        status = (FREE,) * topo.n_terminals
    return SimState(root=0, root_pose=pose0, joint_angles=q, status=status)


def _canonical(topo: DlonTopology, q: np.ndarray):
    psi = topo.anc_joint @ q
    dirs = topo.link_lengths[:, None] * np.column_stack([np.cos(psi), np.sin(psi)])
    distal = topo.anc_link @ dirs
    prox = distal - dirs
    tp = np.empty((topo.n_terminals, 3))
    tp[0] = (0.0, 0.0, 0.0)
    links = np.asarray(topo.terminal_links[1:])
    tp[1:, :2] = distal[links]
    tp[1:, 2] = psi[links]
    return psi, prox, distal, tp


def geometry(state: SimState, topo: DlonTopology) -> Geometry:
    """Forward kinematics of the whole link tree in the world frame."""
    psi, prox, distal, tp = _canonical(topo, state.joint_angles)
    r = tp[state.root]
    # world = G * canonical with G = root_pose * inv(canonical root pose)
    rp = state.root_pose
    gth = rp.theta - r[2]
    c, s = math.cos(gth), math.sin(gth)
    rot = np.array([[c, -s], [s, c]])
    gt = np.array([rp.x, rp.y]) - rot @ r[:2]
    prox_w = prox @ rot.T + gt
    distal_w = distal @ rot.T + gt
    tpw = np.empty_like(tp)
    tpw[:, :2] = tp[:, :2] @ rot.T + gt
    tpw[:, 2] = normalize_angles(tp[:, 2] + gth)
    tpw[state.root] = rp.as_array()
    return Geometry(psi + gth, prox_w, distal_w, tpw)


def observe(state: SimState, topo: DlonTopology) -> Output:
    return Output(geometry(state, topo).terminal_poses, state.status)


def reroot(state: SimState, topo: DlonTopology, terminal: int) -> SimState:
    """Same configuration, described from ``terminal``."""
    if terminal == state.root:
        return state
    pose = Pose2.from_array(geometry(state, topo).terminal_poses[terminal])
    return replace(state, root=terminal, root_pose=pose)


def _pin_stiffness(topo: DlonTopology):
    k_rot = topo.pin_stiffness_ratio * float(np.mean(topo.stiffness) if np.any(topo.stiffness) else 0.05)
    ell = float(np.mean(topo.link_lengths))
    return k_rot / (ell * ell), k_rot


def _balance(state: SimState, topo: DlonTopology, geo: Geometry, u: np.ndarray, pins: dict,
             use_drag: bool = True):
    """Mobility matrix, driving torque and potential Hessian of the quasi-static balance.

    Returns ``(A, tau, H)`` with ``A qdot = tau`` the balance for joint rates
    (before friction) and ``H`` the Gauss-Newton Hessian of the potential used
    by the linearly implicit integrator.
    """
    S = topo.side_signs(state.root)
    nodes = geo.prox[1:]                      # joint j sits at the proximal node of link j + 1
    centers = geo.centers
    dx = centers[None, :, 0] - nodes[:, None, 0]
    dy = centers[None, :, 1] - nodes[:, None, 1]
    jvx = -S * dy
    jvy = S * dx
    L = topo.link_lengths
    K = topo.stiffness
    A = np.diag(topo.damping.copy())
    tau = -K * (state.joint_angles - topo.rest_angles)
    H = np.diag(K.copy())

    if use_drag and topo.drag > 0:
        wv = topo.drag * L
        ww = topo.drag * L ** 3 / 12.0
        A += (jvx * wv) @ jvx.T + (jvy * wv) @ jvy.T + (S * ww) @ S.T
        if u is not None and np.any(u):
            ph = geo.terminal_poses[state.root, :2]
            ux = u[0] - u[2] * (centers[:, 1] - ph[1])
            uy = u[1] + u[2] * (centers[:, 0] - ph[0])
            tau -= jvx @ (wv * ux) + jvy @ (wv * uy) + S @ (ww * u[2])

    tlinks = np.asarray(topo.terminal_links)
    tips = geo.terminal_poses[:, :2]
    if (use_drag and topo.terminal_drag > 0) or pins:
        St = S[:, tlinks]                                  # (J, n_t)
        tdx = tips[None, :, 0] - nodes[:, None, 0]
        tdy = tips[None, :, 1] - nodes[:, None, 1]
        tjx = -St * tdy
        tjy = St * tdx
        if use_drag and topo.terminal_drag > 0:
            b = topo.terminal_drag
            A += b * (tjx @ tjx.T + tjy @ tjy.T)
            if u is not None and np.any(u):
                ph = geo.terminal_poses[state.root, :2]
                ux = u[0] - u[2] * (tips[:, 1] - ph[1])
                uy = u[1] + u[2] * (tips[:, 0] - ph[0])
                tau -= b * (tjx @ ux + tjy @ uy)
        if pins:
            k_lin, k_rot = _pin_stiffness(topo)
            for t, target in pins.items():
                if t == state.root:
                    continue
                ex = tips[t, 0] - target.x
                ey = tips[t, 1] - target.y
                eth = math.sin(geo.terminal_poses[t, 2] - target.theta)
                tau -= k_lin * (tjx[:, t] * ex + tjy[:, t] * ey) + k_rot * St[:, t] * eth
                H += k_lin * (np.outer(tjx[:, t], tjx[:, t]) + np.outer(tjy[:, t], tjy[:, t]))
                H += k_rot * np.outer(St[:, t], St[:, t])
    return A, tau, H


def _solve_stick_slip(M: np.ndarray, tau: np.ndarray, friction: np.ndarray) -> np.ndarray:
    """Joint rates under Coulomb friction: a joint stays put while its holding torque is below friction."""
    n = len(tau)
    if not np.any(friction):
        return np.linalg.solve(M, tau)
    stuck = np.abs(tau) <= friction
    sgn = np.sign(tau)
    qd = np.zeros(n)
    for _ in range(4 * n + 4):
        free = ~stuck
        qd = np.zeros(n)
        if free.any():
            qd[free] = np.linalg.solve(M[np.ix_(free, free)], tau[free] - friction[free] * sgn[free])
        reversed_ = free & (qd * sgn < 0)
        hold = tau - M @ qd
        release = stuck & (np.abs(hold) > friction * (1 + 1e-9))
        if not reversed_.any() and not release.any():
            break
        if reversed_.any():
            stuck[reversed_] = True
            qd[reversed_] = 0.0
        sgn[release] = np.sign(hold[release])
        stuck[release] = False
    return qd


def _advance_numpy(state: SimState, topo: DlonTopology, u, dt: float, friction: bool = True,
                   use_drag: bool = True, extra_pins=None) -> SimState:
    """Reference implementation of one tick (slow; used to cross-check the kernel)."""
    rp = state.root_pose
    if u is not None and np.any(u):
        rp = Pose2(rp.x + dt * u[0], rp.y + dt * u[1], rp.theta + dt * u[2])
        state = replace(state, root_pose=rp)
    pins = dict(state.mated_poses)
    if extra_pins:
        pins.update(extra_pins)
    geo = geometry(state, topo)
    A, tau, H = _balance(state, topo, geo, u, pins, use_drag=use_drag)
    M = A + dt * H
    fr = topo.friction_torque if friction else np.zeros(topo.n_joints)
    qd = _solve_stick_slip(M, tau, fr)
    q = np.clip(state.joint_angles + dt * qd,
                topo.rest_angles - topo.angle_limit, topo.rest_angles + topo.angle_limit)
    return replace(state, joint_angles=q)


def _kernel_consts(topo: DlonTopology) -> dict:
    cache = topo.__dict__.get("_kernel_consts")
    if cache is None:
        k_lin, k_rot = _pin_stiffness(topo)
        cache = dict(
            lengths=np.ascontiguousarray(topo.link_lengths, dtype=float),
            parent=np.ascontiguousarray(topo.parent, dtype=np.int64),
            terminal_links=np.asarray(topo.terminal_links, dtype=np.int64),
            stiffness=np.ascontiguousarray(topo.stiffness, dtype=float),
            damping=np.ascontiguousarray(topo.damping, dtype=float),
            rest=np.ascontiguousarray(topo.rest_angles, dtype=float),
            lo=np.ascontiguousarray(topo.rest_angles - topo.angle_limit),
            hi=np.ascontiguousarray(topo.rest_angles + topo.angle_limit),
            friction=np.ascontiguousarray(topo.friction_torque, dtype=float),
            no_friction=np.zeros(topo.n_joints),
            k_lin=k_lin,
            k_rot=k_rot,
        )
        topo.__dict__["_kernel_consts"] = cache
    return cache


_ZERO3 = np.zeros(3)


def _advance(state: SimState, topo: DlonTopology, u, dt: float, friction: bool = True,
             use_drag: bool = True, extra_pins=None) -> SimState:
    c = _kernel_consts(topo)
    pins = dict(state.mated_poses)
    if extra_pins:
        pins.update(extra_pins)
    ids = np.array(sorted(pins), dtype=np.int64)
    targets = np.array([pins[i].as_array() for i in ids]).reshape(-1, 3)
    ua = _ZERO3 if u is None else np.asarray(u, dtype=float)
    rp, q = _kernel.advance(
        state.root, state.root_pose.as_array(), state.joint_angles, ua, dt,
        c["lengths"], c["parent"], c["terminal_links"], np.ascontiguousarray(topo.side_signs(state.root)),
        c["stiffness"], c["damping"], c["rest"], c["lo"], c["hi"],
        c["friction"] if friction else c["no_friction"],
        topo.drag if use_drag else 0.0, topo.terminal_drag if use_drag else 0.0,
        ids, targets, c["k_lin"], c["k_rot"],
    )
    return replace(state, root_pose=Pose2(rp[0], rp[1], rp[2]), joint_angles=q)


def _rollout(state: SimState, topo: DlonTopology, u, dt: float, n_steps: int):
    """Compiled constant-input run from ``state``; returns (roots, qs, ys, final state)."""
    c = _kernel_consts(topo)
    pins = dict(state.mated_poses)
    ids = np.array(sorted(pins), dtype=np.int64)
    targets = np.array([pins[i].as_array() for i in ids]).reshape(-1, 3)
    roots, qs, ys, rp, q = _kernel.rollout(
        n_steps, state.root, state.root_pose.as_array(), state.joint_angles, np.asarray(u, dtype=float), dt,
        c["lengths"], c["parent"], c["terminal_links"], np.ascontiguousarray(topo.side_signs(state.root)),
        c["stiffness"], c["damping"], c["rest"], c["lo"], c["hi"], c["friction"],
        topo.drag, topo.terminal_drag, ids, targets, c["k_lin"], c["k_rot"],
    )
    return roots, qs, ys, replace(state, root_pose=Pose2(rp[0], rp[1], rp[2]), joint_angles=q)


def step(state: SimState, topo: DlonTopology, u: Twist2, dt_sim: float = 1.0 / SIM_RATE) -> SimState:
    """One simulator tick with the held terminal driven by ``u``."""
    if state.held is None:
        raise NoHeldTerminal("step needs a held terminal; use settle() for free evolution")
    if state.root != state.held:
        state = reroot(state, topo, state.held)
    ua = u.as_array() if isinstance(u, Twist2) else np.asarray(u, dtype=float)
    return _advance(state, topo, ua, dt_sim)


def settle(state: SimState, topo: DlonTopology, duration: float, dt_sim: float = 1.0 / SIM_RATE) -> SimState:
    """Free evolution: the root terminal stays where it is (u = 0) while the rest relaxes."""
    n = int(round(duration / dt_sim))
    if n <= 0:
        return state
    return _rollout(state, topo, np.zeros(3), dt_sim, n)[3]


def grasp(state: SimState, topo: DlonTopology, scenario: Scenario, terminal: int) -> SimState:
    if state.status[terminal] != FREE:
        raise GraspInfeasible(f"terminal {terminal} is {state.status[terminal]}, not free")
    if state.held is not None:
        raise GraspInfeasible(f"terminal {state.held} is already held")
    y = observe(state, topo)
    margins = check_constraints(y, scenario, terminals=[terminal])
    if np.any(margins > 0):
        raise GraspInfeasible(f"terminal {terminal} violates clearance or workspace (max margin {margins.max():.4f})")
    status = list(state.status)
    status[terminal] = HELD
    return replace(reroot(state, topo, terminal), status=tuple(status))


def release(state: SimState) -> SimState:
    status = tuple(FREE if s == HELD else s for s in state.status)
    return replace(state, status=status)


def mate(state: SimState, topo: DlonTopology, terminal: int, goal: Pose2, beta: float, eps_g: float) -> SimState:
    """Seat a held terminal that is within ``eps_g`` of its goal and pin it where it is."""
    if state.status[terminal] != HELD:
        raise MateNotAtGoal(f"terminal {terminal} is not held")
    pose = Pose2.from_array(observe(state, topo).poses[terminal])
    if not d_beta(pose, goal, beta) < eps_g:
        raise MateNotAtGoal(f"terminal {terminal} is {d_beta(pose, goal, beta):.3g} from its goal")
    status = list(state.status)
    status[terminal] = MATED
    mated = dict(state.mated_poses)
    mated[terminal] = pose
    return replace(state, status=tuple(status), mated_poses=mated)


def relax_to_equilibrium(state: SimState, topo: DlonTopology, clamped: np.ndarray,
                         tol: float = 1e-7, max_iter: int = 20000, dt: float = 0.05,
                         reproduce_tol: float = EPS_Y) -> SimState:
    """Frictionless relaxation with every terminal soft-pinned at ``clamped`` (n_t x 3).

    The root terminal is placed exactly at its clamp; the others are held by
    penalty springs. Raises :class:`NoConvergence` when the joint rates do not
    settle or the settled network cannot reproduce the clamped poses.
    """
    clamped = np.asarray(clamped, dtype=float).reshape(topo.n_terminals, 3)
    span = topo.total_length
    for i in range(topo.n_terminals):
        for j in range(i + 1, topo.n_terminals):
            if np.hypot(*(clamped[i, :2] - clamped[j, :2])) > span:
                raise NoConvergence("clamped terminals are farther apart than the network is long")
    pins = {t: Pose2.from_array(clamped[t]) for t in range(topo.n_terminals)}
    s = replace(state, root_pose=pins[state.root], mated_poses={})
    for _ in range(max_iter):
        prev = s.joint_angles
        s = _advance(s, topo, None, dt, friction=False, use_drag=False, extra_pins=pins)
        rate = np.max(np.abs(s.joint_angles - prev)) / dt
        if rate < tol:
            break
    else:
        raise NoConvergence(f"joint rates still {rate:.3g} rad/s after {max_iter} iterations")
    y = observe(s, topo).poses
    err = np.max(np.hypot(y[:, 0] - clamped[:, 0], y[:, 1] - clamped[:, 1]))
    if err > reproduce_tol:
        raise NoConvergence(f"equilibrium misses the clamped poses by {err:.3g} m")
    return replace(s, mated_poses=state.mated_poses)


def check_constraints(y: Output, scenario: Scenario, terminals=None) -> np.ndarray:
    """Stacked margins c(y): obstacle entries (terminal-major) then workspace entries.

    Positive entries are violations. ``terminals`` restricts the rows (default: all).
    """
    poses = y.poses if isinstance(y, Output) else np.asarray(y, dtype=float).reshape(-1, 3)
    idx = list(range(poses.shape[0])) if terminals is None else list(terminals)
    xy = poses[idx, :2]
    obs = scenario.obstacle_array()
    parts = []
    if len(obs):
        r = scenario.safety_radii()
        d = np.hypot(xy[:, None, 0] - obs[None, :, 0], xy[:, None, 1] - obs[None, :, 1])
        parts.append((r[None, :] - d).reshape(-1))
    parts.append(scenario.workspace_margin(xy))
    return np.concatenate(parts)


def obstacle_margins(y: Output, scenario: Scenario, terminal: int) -> np.ndarray:
    obs = scenario.obstacle_array()
    if not len(obs):
        return np.zeros(0)
    p = y.poses[terminal, :2]
    return scenario.safety_radii() - np.hypot(obs[:, 0] - p[0], obs[:, 1] - p[1])
