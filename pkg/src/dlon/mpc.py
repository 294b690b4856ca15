"""Receding-horizon terminal manipulation controller.

The prediction model is ``y_{j+1} = y_j + dt * B u_j`` with ``B`` frozen at
the current output, so every predicted pose is affine in the stacked inputs.
Each solve runs a few sequential convex programming passes: the heading part
of the goal metric is linearized in chord space about the nominal rollout,
obstacle margins become half-spaces, and the resulting QP goes to an
interior-point solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import clarabel
from scipy import sparse

from dlon.se2 import Pose2, d_beta, normalize_angles
from dlon.scenario import Scenario
from dlon.sim import FREE, HELD, Output

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE_RELAXED = "infeasible_relaxed"


class SolverDiverged(RuntimeError):
    pass


def _as_matrix(w, name: str) -> np.ndarray:
    m = np.asarray(w, dtype=float)
    if m.shape == (3,):
        m = np.diag(m)
    if m.shape != (3, 3):
        raise ValueError(f"{name} must be 3 diagonal entries or a 3x3 matrix")
    if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() <= 0:
        raise ValueError(f"{name} must be symmetric positive definite")
    return m


@dataclass(frozen=True)
class MpcConfig:
    """Controller settings. Lengths in m, angles in rad, time in s.

    ``Q`` weighs u (s^2/m^2 on translation), ``Q_delta`` weighs input
    increments, ``p`` scales the terminal goal cost and ``beta`` (m^2) the
    heading part of the goal metric. ``margin_buffer`` (m) tightens every
    linearized constraint so predicted margins stay strictly negative.
    """

    horizon: int = 20
    dt: float = 1.0 / 30.0
    Q: tuple = (0.1, 0.1, 0.05)
    Q_delta: tuple = (1.0, 1.0, 0.5)
    p: float = 10.0
    beta: float = 0.01
    u_bounds: tuple = ((-0.05, 0.05), (-0.05, 0.05), (-0.3, 0.3))
    eps_g: float = 1e-4
    max_tm_steps: int = 900
    scp_iterations: int = 3
    slack_weight: float = 1e4
    slack_quadratic: float = 1.0
    margin_buffer: float = 0.002
    scp_tol: float = 1e-7
    solver_eps: float = 1e-8
    solver_max_iter: int = 200

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least one step")
        if self.dt <= 0 or self.eps_g <= 0:
            raise ValueError("dt and eps_g must be positive")
        if self.p < 0 or self.beta < 0:
            raise ValueError("p and beta must be non-negative")
        if self.scp_iterations < 1 or self.max_tm_steps < 0:
            raise ValueError("need at least one SCP pass and a non-negative step budget")
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "Q", tuple(map(tuple, _as_matrix(self.Q, "Q"))))
        object.__setattr__(self, "Q_delta", tuple(map(tuple, _as_matrix(self.Q_delta, "Q_delta"))))
        b = tuple((float(lo), float(hi)) for lo, hi in self.u_bounds)
        if len(b) != 3 or any(lo > hi for lo, hi in b):
            raise ValueError("u_bounds needs three (lo, hi) pairs")
        object.__setattr__(self, "u_bounds", b)

    @property
    def Qm(self) -> np.ndarray:
        return np.array(self.Q)

    @property
    def Qdm(self) -> np.ndarray:
        return np.array(self.Q_delta)

    @property
    def u_lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.u_bounds])

    @property
    def u_hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.u_bounds])

    @classmethod
    def from_dict(cls, d: dict) -> "MpcConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown controller keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MpcSolution:
    u_sequence: np.ndarray
    predicted_y: np.ndarray
    cost: float
    constraint_margins: np.ndarray
    status: str
    cost_history: list = field(default_factory=list)
    slack: np.ndarray = None

    @property
    def u0(self) -> np.ndarray:
        return self.u_sequence[0]


def goal_from_receptacle(receptacle_pose: Pose2, insertion_offset: Pose2) -> Pose2:
    return receptacle_pose.compose(insertion_offset)


def goal_reached(rho_h, rho_g, cfg: MpcConfig) -> bool:
    return bool(d_beta(_pose(rho_h), _pose(rho_g), cfg.beta) < cfg.eps_g)


def _pose(p) -> Pose2:
    return p if isinstance(p, Pose2) else Pose2.from_array(p)


def _held_pose(y):
    if isinstance(y, Output):
        if y.held is None:
            raise ValueError("output has no held terminal")
        return Pose2.from_array(y.poses[y.held])
    return _pose(y)


def stage_cost(y, u, u_prev, goal, cfg: MpcConfig) -> float:
    """``d_beta(rho_h, goal) + u'Qu + du'Q_delta du``; ``y`` is an Output or the held pose."""
    u = np.asarray(u, dtype=float)
    du = u - np.asarray(u_prev, dtype=float)
    return float(d_beta(_held_pose(y), _pose(goal), cfg.beta) + u @ cfg.Qm @ u + du @ cfg.Qdm @ du)


def terminal_cost(y, goal, cfg: MpcConfig) -> float:
    return float(cfg.p * d_beta(_held_pose(y), _pose(goal), cfg.beta))


class _Problem:
    """Everything about one solve that does not depend on the linearization point."""

    def __init__(self, y0: Output, B: np.ndarray, goal: Pose2, scenario: Scenario, cfg: MpcConfig, u_prev):
        self.cfg = cfg
        self.N = N = cfg.horizon
        self.poses = np.asarray(y0.poses, dtype=float)
        self.n_t = self.poses.shape[0]
        self.held = y0.held
        self.B = np.asarray(B, dtype=float).reshape(3 * self.n_t, 3)
        self.goal = goal
        self.scenario = scenario
        self.u_prev = np.zeros(3) if u_prev is None else np.asarray(u_prev, dtype=float)
        # constrained terminals: held and free ones
        self.active = [t for t, s in enumerate(y0.status) if s in (FREE, HELD)]
        # cumulative-sum operator: row j sums u_0 .. u_{j-1}
        self.L = np.tril(np.ones((N + 1, N)), k=-1)
        # (n_t, N+1, 3, 3N) affine maps from stacked inputs to pose offsets
        self.maps = cfg.dt * np.einsum("jk,tab->tjakb", self.L, self.B.reshape(self.n_t, 3, 3)).reshape(
            self.n_t, N + 1, 3, 3 * N)
        self.obs = scenario.obstacle_array()
        self.radii = scenario.safety_radii() if len(self.obs) else np.zeros(0)
        self.nz = 4 * N
        self.w = np.ones(N + 1)
        self.w[0] = 0.0
        self.w[-1] = cfg.p
        self.lo = np.tile(cfg.u_lo, N)
        self.hi = np.tile(cfg.u_hi, N)
        self._base_P, self._base_q = self._fixed_cost()

    def predict(self, U: np.ndarray) -> np.ndarray:
        """Frozen-model rollout; headings are left unwrapped."""
        return self.poses[None] + np.einsum("tjaz,z->jta", self.maps, U.reshape(-1))

    def _fixed_cost(self):
        cfg, N = self.cfg, self.N
        nu = 3 * N
        P = np.zeros((self.nz, self.nz))
        q = np.zeros(self.nz)
        D = np.eye(nu) - np.eye(nu, k=-3)
        d = np.zeros(nu)
        d[:3] = -self.u_prev
        Qd = np.kron(np.eye(N), cfg.Qdm)
        G = self.maps[self.held, :, :2].reshape(-1, nu)
        wxy = np.repeat(self.w, 2)
        e = np.tile(self.poses[self.held, :2] - np.array([self.goal.x, self.goal.y]), N + 1)
        P[:nu, :nu] = 2.0 * (np.kron(np.eye(N), cfg.Qm) + D.T @ Qd @ D + G.T @ (wxy[:, None] * G))
        q[:nu] = 2.0 * (D.T @ Qd @ d + G.T @ (wxy * e))
        P[nu:, nu:] = 2.0 * cfg.slack_quadratic * np.eye(N)
        q[nu:] = cfg.slack_weight
        return P, q

    def heading_terms(self, U_nom: np.ndarray):
        """Gauss-Newton model of ``beta * |chord(theta) - chord(goal)|^2`` about the nominal headings."""
        cfg, nu = self.cfg, 3 * self.N
        if cfg.beta == 0.0:
            return 0.0, 0.0
        H = self.maps[self.held, :, 2]
        z_nom = U_nom.reshape(-1)
        hz = H @ z_nom
        sj = np.sin(self.poses[self.held, 2] + hz - self.goal.theta)
        wb = self.w * cfg.beta
        P = np.zeros((self.nz, self.nz))
        q = np.zeros(self.nz)
        P[:nu, :nu] = 2.0 * H.T @ (wb[:, None] * H)
        q[:nu] = 2.0 * H.T @ (wb * (sj - hz))
        return P, q

    def constraint_rows(self, U_nom: np.ndarray):
        """Linearized margin rows ``a'z + s_j >= b``, with rows that the box can never activate removed."""
        cfg, N = self.cfg, self.N
        nom = self.predict(U_nom)
        xmin, ymin, xmax, ymax = self.scenario.workspace
        steps = np.arange(1, N + 1)
        tight = cfg.margin_buffer
        A_parts, b_parts, s_parts = [], [], []
        for t in self.active:
            Gxy = self.maps[t, 1:, :2]
            p0 = self.poses[t, :2]
            if len(self.obs):
                diff = nom[1:, t, None, :2] - self.obs[None, :, :2]
                dist = np.hypot(diff[..., 0], diff[..., 1])
                n = np.where(dist[..., None] > 1e-12, diff / np.maximum(dist, 1e-12)[..., None], [1.0, 0.0])
                A_parts.append(np.einsum("jok,jkz->joz", n, Gxy).reshape(-1, 3 * N))
                b_parts.append((self.radii[None, :] + tight
                                - np.einsum("jok,ok->jo", n, p0[None, :] - self.obs[:, :2])).reshape(-1))
                s_parts.append(np.repeat(steps, len(self.obs)))
            ws = np.stack([Gxy[:, 0], -Gxy[:, 0], Gxy[:, 1], -Gxy[:, 1]], axis=1)
            wb = np.array([xmin - p0[0], p0[0] - xmax, ymin - p0[1], p0[1] - ymax]) + tight
            A_parts.append(ws.reshape(-1, 3 * N))
            b_parts.append(np.tile(wb, N))
            s_parts.append(np.repeat(steps, 4))
        rows = np.concatenate(A_parts)
        rhs = np.concatenate(b_parts)
        step = np.concatenate(s_parts)
        reach = np.minimum(rows * self.lo, rows * self.hi).sum(axis=1)
        keep = reach < rhs
        return rows[keep], rhs[keep], step[keep]

    def margins(self, Y: np.ndarray) -> np.ndarray:
        """True margins per predicted step: obstacle rows (terminal-major) then workspace rows."""
        xy = Y[:, self.active, :2]
        parts = []
        if len(self.obs):
            d = np.hypot(xy[:, :, None, 0] - self.obs[None, None, :, 0], xy[:, :, None, 1] - self.obs[None, None, :, 1])
            parts.append((self.radii[None, None, :] - d).reshape(Y.shape[0], -1))
        parts.append(self.scenario.workspace_margin(xy))
        return np.concatenate(parts, axis=1)

    def true_cost(self, U: np.ndarray):
        """Nonlinear objective plus the slack penalty needed to cover actual violations."""
        cfg = self.cfg
        Y = self.predict(U)
        h = Y[:, self.held]
        dist = (h[:, 0] - self.goal.x) ** 2 + (h[:, 1] - self.goal.y) ** 2 \
            + cfg.beta * 2.0 * (1.0 - np.cos(h[:, 2] - self.goal.theta))
        cost = float(dist[0] + self.w @ dist)
        du = U - np.vstack([self.u_prev, U[:-1]])
        cost += float(np.einsum("ja,ab,jb->", U, cfg.Qm, U) + np.einsum("ja,ab,jb->", du, cfg.Qdm, du))
        m = self.margins(Y)
        viol = np.maximum(m[1:].max(axis=1), 0.0) if m.shape[1] else np.zeros(self.N)
        cost += float(cfg.slack_weight * viol.sum() + cfg.slack_quadratic * (viol ** 2).sum())
        return cost, Y, m, viol

    def qp(self, U_nom: np.ndarray):
        cfg, N = self.cfg, self.N
        nu = 3 * N
        Ph, qh = self.heading_terms(U_nom)
        P = self._base_P + Ph
        q = self._base_q + qh
        rows, rhs, step = self.constraint_rows(U_nom)
        # Clarabel form: G z + s = h with s >= 0
        m = len(rhs)
        G = np.zeros((2 * nu + N + m, self.nz))
        G[:nu, :nu] = np.eye(nu)
        G[nu:2 * nu, :nu] = -np.eye(nu)
        G[2 * nu:2 * nu + N, nu:] = -np.eye(N)
        G[2 * nu + N:, :nu] = -rows
        G[2 * nu + N + np.arange(m), nu + step - 1] = -1.0
        h = np.concatenate([self.hi, -self.lo, np.zeros(N), -rhs])
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_gap_abs = settings.tol_gap_rel = cfg.solver_eps
        settings.tol_feas = cfg.solver_eps
        settings.max_iter = cfg.solver_max_iter
        solver = clarabel.DefaultSolver(sparse.csc_matrix(np.triu(P)), q, sparse.csc_matrix(G), h,
                                        [clarabel.NonnegativeConeT(len(h))], settings)
        res = solver.solve()
        status = str(res.status)
        z = np.asarray(res.x)
        if not np.all(np.isfinite(z)) or status not in ("Solved", "AlmostSolved"):
            return None, status
        return z, status


def solve(y0: Output, model, goal: Pose2, scenario: Scenario, cfg: MpcConfig,
          warm_start: MpcSolution = None, u_prev=None) -> MpcSolution:
    """One receding-horizon solve from ``y0``; apply ``u_sequence[0]``.

    ``model`` provides ``matrix(y)`` (or is the matrix itself). SCP iterates
    after the first are kept only if they lower the nonlinear cost, so
    ``cost_history`` never increases.
    """
    if y0.held is None:
        raise ValueError("solve needs a held terminal")
    B = model.matrix(y0) if hasattr(model, "matrix") else np.asarray(model)
    prob = _Problem(y0, B, goal, scenario, cfg, u_prev)
    N = cfg.horizon
    lo, hi = cfg.u_lo, cfg.u_hi
    if warm_start is not None and warm_start.u_sequence.shape == (N, 3):
        U = np.vstack([warm_start.u_sequence[1:], warm_start.u_sequence[-1:]])
    else:
        U = np.zeros((N, 3))
    U = np.clip(U, lo, hi)
    best = None
    history = []
    status = OPTIMAL
    for it in range(cfg.scp_iterations):
        z, st = prob.qp(U)
        if z is None:
            if best is None:
                raise SolverDiverged(f"QP solver failed ({st}) on the first pass")
            break
        cand = np.clip(z[:3 * N].reshape(N, 3), lo, hi)
        cost, Y, m, viol = prob.true_cost(cand)
        if best is not None and cost > best[0]:
            break
        best = (cost, cand, Y, m, viol, st)
        history.append(cost)
        moved = np.max(np.abs(cand - U))
        U = cand
        if it > 0 and moved < cfg.scp_tol:
            break
    cost, U, Y, m, viol, st = best
    if st != "Solved":
        status = MAX_ITER
    if np.any(viol > 1e-7):
        status = INFEASIBLE_RELAXED
    Y = Y.copy()
    Y[..., 2] = normalize_angles(Y[..., 2])
    return MpcSolution(U, Y, cost, m, status, history, viol)
