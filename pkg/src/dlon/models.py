"""Control-oriented input models: rigid body, windowed least squares, and their discounted blend."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from dlon.se2 import normalize_angles
from dlon.sim import MATED, Output


class TrajectoryTooShort(ValueError):
    pass


def rigid_body_matrix(y, held: int, mated=()) -> np.ndarray:
    """Stacked ``3 x 3`` blocks mapping the held terminal's twist to every terminal's twist.

    ``y`` is an :class:`Output` or an ``(n_t, 3)`` / flat pose array. Mated
    terminals (from ``mated`` or the output's status) get a zero block.
    """
    if isinstance(y, Output):
        poses = y.poses
        mated = set(mated) | {i for i, s in enumerate(y.status) if s == MATED}
    else:
        poses = np.asarray(y, dtype=float).reshape(-1, 3)
        mated = set(mated)
    n = poses.shape[0]
    B = np.zeros((3 * n, 3))
    xh, yh = poses[held, 0], poses[held, 1]
    for t in range(n):
        if t in mated:
            continue
        r = 3 * t
        B[r, 0] = 1.0
        B[r + 1, 1] = 1.0
        B[r + 2, 2] = 1.0
        B[r, 2] = yh - poses[t, 1]
        B[r + 1, 2] = poses[t, 0] - xh
    return B


@dataclass
class RigidBodyModel:
    held: int

    def matrix(self, y) -> np.ndarray:
        return rigid_body_matrix(y, self.held)


class LocalLinearModel:
    """Ridge least squares ``y_dot ~ B u`` over the last ``capacity`` samples."""

    def __init__(self, n_outputs: int, capacity: int = 30, mu: float = 1e-6):
        if capacity < 1:
            raise ValueError("window capacity must be positive")
        self.n_outputs = n_outputs
        self.capacity = capacity
        self.mu = mu
        self.window = deque(maxlen=capacity)
        self.B = np.zeros((n_outputs, 3))

    def update_window(self, ydot, u) -> None:
        ydot = np.asarray(ydot, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(3)
        if ydot.shape[0] != self.n_outputs:
            raise ValueError(f"expected {self.n_outputs} output rates, got {ydot.shape[0]}")
        self.window.append((ydot, u))

    def clear(self) -> None:
        self.window.clear()
        self.B = np.zeros((self.n_outputs, 3))

    def fit(self) -> np.ndarray:
        """Minimise sum ||y_dot - B u||^2 + mu ||B||_F^2 over the window."""
        if not self.window:
            self.B = np.zeros((self.n_outputs, 3))
            return self.B
        Yd = np.array([w[0] for w in self.window])
        U = np.array([w[1] for w in self.window])
        G = U.T @ U + self.mu * np.eye(3)
        self.B = np.linalg.solve(G, U.T @ Yd).T
        return self.B

    def __len__(self):
        return len(self.window)


@dataclass
class CompositeModel:
    """``alpha * B_rb(y) + (1 - alpha) * B_ls`` with ``alpha <- gamma * alpha`` per control step.

    ``adaptive=False`` pins alpha at 1, which gives the plain rigid-body controller.
    """

    held: int
    n_terminals: int
    gamma: float = 0.98
    capacity: int = 30
    mu: float = 1e-6
    adaptive: bool = True
    alpha: float = 1.0
    local: LocalLinearModel = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        self.local = LocalLinearModel(3 * self.n_terminals, self.capacity, self.mu)

    def reset(self, held: int = None) -> None:
        if held is not None:
            self.held = held
        self.alpha = 1.0
        self.local.clear()

    def fit(self) -> np.ndarray:
        return self.local.fit()

    def push(self, ydot, u) -> None:
        self.local.update_window(ydot, u)

    def discount(self) -> None:
        if self.adaptive:
            self.alpha *= self.gamma

    def matrix(self, y) -> np.ndarray:
        return composite_matrix(self, y)


def composite_matrix(cm: CompositeModel, y) -> np.ndarray:
    a = cm.alpha
    return a * rigid_body_matrix(y, cm.held) + (1.0 - a) * cm.local.B


def discount(cm: CompositeModel) -> CompositeModel:
    cm.discount()
    return cm


def rollout(y0, u_seq, dt: float, matrix_fn) -> np.ndarray:
    """Euler rollout ``y_{k+1} = y_k + dt B(y_k) u_k`` on flat pose vectors."""
    y = np.asarray(y0, dtype=float).reshape(-1).copy()
    out = [y.copy()]
    for u in u_seq:
        y = y + dt * matrix_fn(y) @ u
        out.append(y.copy())
    return np.array(out)


def _max_errors(pred: np.ndarray, truth: np.ndarray, terminals) -> tuple:
    p = pred.reshape(len(pred), -1, 3)[:, terminals]
    t = truth.reshape(len(truth), -1, 3)[:, terminals]
    trans = np.hypot(p[..., 0] - t[..., 0], p[..., 1] - t[..., 1]).max()
    rot = np.abs(normalize_angles(p[..., 2] - t[..., 2])).max()
    return float(trans), float(rot)


def evaluate_models(dataset, window_s: float = 1.0, horizon_s: float = 5.0, gamma: float = 0.98,
                    mu: float = 1e-6, held: int = 0) -> dict:
    """Maximum prediction error of the three models over each trajectory.

    The least-squares window covers the first ``window_s`` seconds; each model
    then predicts the following ``horizon_s`` seconds open loop from the
    recorded inputs. The composite model carries the alpha it reached after
    the window. Errors are over the free terminals.
    """
    rate = float(dataset.meta.get("F_c", 30))
    n_w = int(round(window_s * rate))
    n_h = int(round(horizon_s * rate))
    if dataset.n_samples < n_w + n_h + 1:
        raise TrajectoryTooShort(f"need {n_w + n_h + 1} samples per trajectory, have {dataset.n_samples}")
    n_t = int(dataset.meta.get("n_terminals", dataset.trajectories[0].y.shape[1]))
    free = [t for t in range(n_t) if t != held]
    dt = 1.0 / rate
    rows = {"rigid": [], "ls": [], "composite": []}
    for traj in dataset.trajectories:
        cm = CompositeModel(held, n_t, gamma=gamma, capacity=n_w, mu=mu)
        for k in range(n_w):
            cm.push(traj.ydot[k].reshape(-1), traj.u[k])
            cm.discount()
        B_ls = cm.fit()
        y0 = traj.y[n_w].reshape(-1)
        us = traj.u[n_w:n_w + n_h]
        truth = traj.y[n_w:n_w + n_h + 1].reshape(n_h + 1, -1)
        preds = {
            "rigid": rollout(y0, us, dt, lambda y: rigid_body_matrix(y, held)),
            "ls": rollout(y0, us, dt, lambda y: B_ls),
            "composite": rollout(y0, us, dt, cm.matrix),
        }
        for name, pred in preds.items():
            rows[name].append(_max_errors(pred, truth, free))
    table = {}
    for name, errs in rows.items():
        e = np.array(errs)
        table[name] = {
            "trans_mean": float(e[:, 0].mean()), "trans_std": float(e[:, 0].std()),
            "rot_mean": float(e[:, 1].mean()), "rot_std": float(e[:, 1].std()),
            "per_trajectory": e.tolist(),
        }
    return table
