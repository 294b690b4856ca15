"""Excitation trajectories and the recorded dataset of (x, y, y_dot, u) samples."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dlon import sim
from dlon.se2 import Pose2, normalize_angles
from dlon.topology import DlonTopology

DEFAULT_U_BOUNDS = ((-0.05, 0.05), (-0.05, 0.05), (-0.3, 0.3))
SIM_RATE = 240
CONTROL_RATE = 30


class DatasetError(RuntimeError):
    pass


class SeriesTooShort(DatasetError):
    pass


class IncompatibleRates(DatasetError):
    pass


class SchemaMismatch(DatasetError):
    pass


class RaggedTrajectories(DatasetError):
    pass


@dataclass
class Trajectory:
    """One constant-input recording at a fixed rate.

    ``root`` holds the pose of the held terminal (the root of ``q``), ``y``
    is ``(N, n_t, 3)`` and ``ydot`` matches it.
    """

    time: np.ndarray
    u: np.ndarray
    root: np.ndarray
    q: np.ndarray
    y: np.ndarray
    ydot: np.ndarray

    def __len__(self):
        return len(self.time)

    def state(self, k: int, n_terminals: int, held: int = 0) -> sim.SimState:
        status = [sim.FREE] * n_terminals
        status[held] = sim.HELD
        return sim.SimState(held, Pose2.from_array(self.root[k]), self.q[k], tuple(status))


@dataclass
class Dataset:
    trajectories: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(t) for t in self.trajectories}
        if len(lengths) > 1:
            raise RaggedTrajectories(f"trajectories must share one length, got {sorted(lengths)}")

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_samples(self) -> int:
        return len(self.trajectories[0]) if self.trajectories else 0

    def stacked(self):
        """All samples as flat arrays ``(y, u, ydot)`` with y, ydot of width 3 n_t."""
        if not self.trajectories:
            return np.zeros((0, 0)), np.zeros((0, 3)), np.zeros((0, 0))
        y = np.concatenate([t.y.reshape(len(t), -1) for t in self.trajectories])
        u = np.concatenate([t.u for t in self.trajectories])
        yd = np.concatenate([t.ydot.reshape(len(t), -1) for t in self.trajectories])
        return y, u, yd


def sample_input(rng: np.random.Generator, bounds=DEFAULT_U_BOUNDS) -> np.ndarray:
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return rng.uniform(lo, hi)


def excite(topo: DlonTopology, duration_s: float = 15.0, seed: int = 0, u_bounds=DEFAULT_U_BOUNDS,
           burn_in_s: float = 2.0, rate: float = SIM_RATE, u=None, start: sim.SimState = None) -> dict:
    """Hold terminal 0 and drive it with one constant input for ``duration_s``.

    Samples are recorded before every tick; the first ``burn_in_s`` seconds
    are discarded. Returns raw arrays at the simulation rate.
    """
    rng = np.random.default_rng(seed)
    u = sample_input(rng, u_bounds) if u is None else np.asarray(u, dtype=float)
    state = start if start is not None else sim.initial_state(topo)
    if state.held is None:
        status = list(state.status)
        status[0] = sim.HELD
        state = sim.reroot(sim.SimState(state.root, state.root_pose, state.joint_angles, tuple(status),
                                        state.mated_poses), topo, 0)
    n = int(round(duration_s * rate))
    burn = int(round(burn_in_s * rate))
    dt = 1.0 / rate
    roots, qs, ys, _ = sim._rollout(state, topo, u, dt, n)
    keep = slice(burn, n)
    return dict(
        time=np.arange(n - burn) / rate,
        u=np.tile(u, (n - burn, 1)),
        root=roots[keep],
        q=qs[keep],
        y=ys[keep],
        rate=rate,
    )


def _angle_mask(shape_tail, angle_mask):
    if angle_mask is not None:
        return np.broadcast_to(np.asarray(angle_mask, dtype=bool), shape_tail)
    mask = np.zeros(shape_tail, dtype=bool)
    if len(shape_tail) >= 1 and shape_tail[-1] == 3:
        mask[..., 2] = True
    return mask


def differentiate(series, rate: float, angle_mask=None) -> np.ndarray:
    """Central differences inside, one-sided at both ends.

    By default the last channel of width-3 poses is treated as an angle and
    differenced through :func:`normalize_angle` of the increment.
    """
    y = np.asarray(series, dtype=float)
    if y.shape[0] < 3:
        raise SeriesTooShort(f"need at least 3 samples, got {y.shape[0]}")
    mask = _angle_mask(y.shape[1:], angle_mask)
    inc = np.diff(y, axis=0)
    inc = np.where(mask, normalize_angles(inc), inc)
    out = np.empty_like(y)
    out[1:-1] = 0.5 * (inc[:-1] + inc[1:]) * rate
    out[0] = inc[0] * rate
    out[-1] = inc[-1] * rate
    return out


def downsample(series, rate_in: float, rate_out: float, angle_mask=None, smooth: bool = True) -> np.ndarray:
    """Trailing moving average over ``rate_in / rate_out`` samples, then keep every such sample.

    Kept samples sit at the end of each full window (indices ``w-1, 2w-1, ...``).
    """
    ratio = rate_in / rate_out
    w = int(round(ratio))
    if w < 1 or abs(ratio - w) > 1e-9:
        raise IncompatibleRates(f"{rate_in} Hz is not an integer multiple of {rate_out} Hz")
    y = np.asarray(series, dtype=float)
    if w == 1:
        return y.copy()
    idx = np.arange(w - 1, y.shape[0], w)
    if not smooth:
        return y[idx].copy()
    mask = _angle_mask(y.shape[1:], angle_mask)
    work = np.where(mask, np.unwrap(y, axis=0), y) if mask.any() else y
    c = np.cumsum(np.concatenate([np.zeros((1,) + y.shape[1:]), work]), axis=0)
    avg = (c[idx + 1] - c[idx + 1 - w]) / w
    return np.where(mask, normalize_angles(avg), avg)


def to_control_rate(raw: dict, rate_out: float = CONTROL_RATE) -> Trajectory:
    """Decimate a raw recording and estimate velocities at the control rate.

    State and output snapshots are decimated without smoothing so that every
    stored ``y`` is exactly ``observe(x)``; ``u`` goes through the filter.
    """
    rate_in = raw["rate"]
    idx_y = downsample(raw["y"], rate_in, rate_out, smooth=False)
    y = idx_y
    root = downsample(raw["root"], rate_in, rate_out, smooth=False)
    q = downsample(raw["q"], rate_in, rate_out, smooth=False, angle_mask=np.zeros(raw["q"].shape[1], bool))
    u = downsample(raw["u"], rate_in, rate_out, angle_mask=np.zeros(3, bool))
    ydot = differentiate(y, rate_out)
    return Trajectory(np.arange(len(y)) / rate_out, u, root, q, y, ydot)


def build_dataset(topo: DlonTopology, n_trajectories: int = 100, seed: int = 0, duration_s: float = 15.0,
                  burn_in_s: float = 2.0, u_bounds=DEFAULT_U_BOUNDS, rate_sim: float = SIM_RATE,
                  rate_control: float = CONTROL_RATE, progress=None) -> Dataset:
    """Generate the dataset; trajectory ``i`` uses seed ``(seed, i)``."""
    trajs = []
    for i in range(n_trajectories):
        raw = excite(topo, duration_s, seed=np.random.SeedSequence([seed, i]).generate_state(1)[0],
                     u_bounds=u_bounds, burn_in_s=burn_in_s, rate=rate_sim)
        trajs.append(to_control_rate(raw, rate_control))
        if progress is not None:
            progress(i)
    meta = dict(
        F_s=rate_sim, F_c=rate_control, seed=seed, topology_hash=topo.topology_hash(),
        n_terminals=topo.n_terminals, n_joints=topo.n_joints, held=0,
        duration_s=duration_s, burn_in_s=burn_in_s, u_bounds=[list(b) for b in u_bounds],
    )
    return Dataset(trajs, meta)


def _columns(n_t: int, n_j: int) -> list:
    cols = ["time", "u_vx", "u_vy", "u_omega"]
    for i in range(n_t):
        cols += [f"t{i}_x", f"t{i}_y", f"t{i}_theta"]
    for i in range(n_t):
        cols += [f"t{i}_vx", f"t{i}_vy", f"t{i}_omega"]
    cols += ["root_x", "root_y", "root_theta"] + [f"q{j}" for j in range(n_j)]
    return cols


def save_dataset(ds: Dataset, path) -> Path:
    """One CSV per trajectory plus ``meta.json``; floats are written with full precision."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for old in path.glob("trajectory_*.csv"):
        old.unlink()
    meta = dict(ds.meta)
    meta["n_trajectories"] = len(ds)
    meta["n_samples"] = ds.n_samples
    n_t, n_j = meta.get("n_terminals", 0), meta.get("n_joints", 0)
    meta["columns"] = _columns(n_t, n_j)
    for i, t in enumerate(ds.trajectories):
        block = np.column_stack([t.time, t.u, t.y.reshape(len(t), -1), t.ydot.reshape(len(t), -1), t.root, t.q])
        with open(path / f"trajectory_{i:03d}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(meta["columns"])
            for row in block:
                w.writerow([repr(float(v)) for v in row])
    tmp = path / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path / "meta.json")
    return path


def load_dataset(path, topology_hash: str = None) -> Dataset:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"no dataset metadata at {meta_file}")
    meta = json.loads(meta_file.read_text())
    if topology_hash is not None and meta.get("topology_hash") != topology_hash:
        raise SchemaMismatch(f"dataset was recorded for topology {meta.get('topology_hash')}, expected {topology_hash}")
    n_t, n_j = meta["n_terminals"], meta["n_joints"]
    expected = _columns(n_t, n_j)
    trajs = []
    for i in range(meta.get("n_trajectories", 0)):
        with open(path / f"trajectory_{i:03d}.csv", newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != expected:
                raise SchemaMismatch(f"unexpected columns in trajectory {i}")
            block = np.array([[float(v) for v in row] for row in r]).reshape(-1, len(expected))
        k = 4 + 3 * n_t
        trajs.append(Trajectory(
            time=block[:, 0], u=block[:, 1:4],
            y=block[:, 4:k].reshape(-1, n_t, 3),
            ydot=block[:, k:k + 3 * n_t].reshape(-1, n_t, 3),
            root=block[:, k + 3 * n_t:k + 3 * n_t + 3],
            q=block[:, k + 3 * n_t + 3:],
        ))
    meta.pop("columns", None)
    meta.pop("n_trajectories", None)
    meta.pop("n_samples", None)
    return Dataset(trajs, meta)
