import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dlon import dataset, sim
from dlon.dataset import Dataset, Trajectory
from dlon.se2 import Pose2
from dlon.topology import branched_topology


def test_zero_input_gives_constant_trajectory(topo):
    raw = dataset.excite(topo, duration_s=3.0, u=np.zeros(3), burn_in_s=1.0)
    assert np.all(raw["y"] == raw["y"][0])
    assert np.all(raw["q"] == raw["q"][0])


def test_same_seed_bit_identical(topo):
    a = dataset.excite(topo, duration_s=2.0, seed=11, burn_in_s=0.5)
    b = dataset.excite(topo, duration_s=2.0, seed=11, burn_in_s=0.5)
    for k in ("y", "q", "root", "u"):
        assert np.array_equal(a[k], b[k])


def test_retained_raw_sample_count(topo):
    raw = dataset.excite(topo, duration_s=15.0, seed=0, burn_in_s=2.0)
    assert raw["y"].shape[0] == (15 - 2) * 240 == 3120


def test_excite_holds_terminal_zero_with_sampled_input(topo):
    raw = dataset.excite(topo, duration_s=1.0, seed=3, burn_in_s=0.0)
    u = raw["u"][0]
    lo = np.array([b[0] for b in dataset.DEFAULT_U_BOUNDS])
    hi = np.array([b[1] for b in dataset.DEFAULT_U_BOUNDS])
    assert np.all(u >= lo) and np.all(u <= hi)
    assert raw["root"] == pytest.approx(raw["y"][:, 0], abs=1e-12)
    # terminal 0 moves kinematically with u
    assert raw["y"][-1, 0, :2] - raw["y"][0, 0, :2] == pytest.approx(u[:2] * (len(raw["y"]) - 1) / 240, abs=1e-12)


# ---------------------------------------------------------------- differentiate

def test_differentiate_ramp():
    c, rate = 0.25, 30.0
    x = np.arange(20)[:, None] * c
    d = dataset.differentiate(x, rate, angle_mask=[False])
    assert d[1:-1] == pytest.approx(np.full((18, 1), c * rate))


def test_differentiate_constant():
    assert np.all(dataset.differentiate(np.full((10, 3), 2.5), 30.0) == 0.0)


def test_differentiate_sine_against_cosine():
    rate = 240.0
    t = np.arange(0, 2, 1 / rate)
    d = dataset.differentiate(np.sin(2 * np.pi * t)[:, None], rate, angle_mask=[False])
    exact = 2 * np.pi * np.cos(2 * np.pi * t)
    assert np.abs(d[1:-1, 0] - exact[1:-1]).max() < 1e-3


def test_differentiate_wraps_angles():
    th = np.array([3.1, -3.1, -3.0])
    y = np.stack([np.zeros(3), np.zeros(3), th], axis=1)
    d = dataset.differentiate(y, 1.0)
    assert d[0, 2] == pytest.approx(2 * np.pi - 6.2)


def test_differentiate_too_short():
    with pytest.raises(dataset.SeriesTooShort):
        dataset.differentiate(np.zeros((2, 3)), 30.0)


# ---------------------------------------------------------------- downsample

def test_downsample_keeps_every_eighth():
    x = np.arange(240.0)[:, None]
    out = dataset.downsample(x, 240, 30, smooth=False, angle_mask=[False])
    assert out[:, 0] == pytest.approx(np.arange(7, 240, 8))
    assert len(out) == 30


def test_downsample_identity():
    x = np.random.default_rng(0).normal(size=(17, 3))
    assert np.array_equal(dataset.downsample(x, 30, 30), x)


@given(st.floats(-3, 3))
def test_downsample_constant_unchanged(v):
    out = dataset.downsample(np.full((64, 3), v), 240, 30)
    assert out == pytest.approx(np.full((8, 3), v), abs=1e-12)


def test_downsample_moving_average():
    x = np.arange(16.0)[:, None]
    assert dataset.downsample(x, 240, 30, angle_mask=[False])[:, 0] == pytest.approx([3.5, 11.5])


def test_downsample_incompatible_rates():
    with pytest.raises(dataset.IncompatibleRates):
        dataset.downsample(np.zeros((10, 3)), 240, 70)


# ---------------------------------------------------------------- persistence

@pytest.fixture(scope="module")
def small_dataset(topo):
    return dataset.build_dataset(topo, 3, seed=5, duration_s=3.0, burn_in_s=1.0)


def test_round_trip(tmp_path, small_dataset):
    dataset.save_dataset(small_dataset, tmp_path / "d")
    back = dataset.load_dataset(tmp_path / "d")
    assert len(back) == 3
    assert back.meta == json.loads(json.dumps(small_dataset.meta))
    for a, b in zip(small_dataset.trajectories, back.trajectories):
        for k in ("time", "u", "root", "q", "y", "ydot"):
            assert np.array_equal(getattr(a, k), getattr(b, k))


def test_wrong_topology_hash(tmp_path, small_dataset):
    dataset.save_dataset(small_dataset, tmp_path / "d")
    with pytest.raises(dataset.SchemaMismatch):
        dataset.load_dataset(tmp_path / "d", topology_hash="0" * 16)
    other = branched_topology(stiffness=0.07)
    with pytest.raises(dataset.SchemaMismatch):
        dataset.load_dataset(tmp_path / "d", topology_hash=other.topology_hash())


def test_empty_round_trip(tmp_path):
    ds = Dataset([], dict(n_terminals=3, n_joints=26, seed=0))
    dataset.save_dataset(ds, tmp_path / "e")
    back = dataset.load_dataset(tmp_path / "e")
    assert len(back) == 0


def test_stored_ydot_consistent_with_y(tmp_path, small_dataset):
    dataset.save_dataset(small_dataset, tmp_path / "d")
    back = dataset.load_dataset(tmp_path / "d")
    rate = back.meta["F_c"]
    for t in back.trajectories:
        assert np.array_equal(dataset.differentiate(t.y, rate), t.ydot)


def test_stored_y_is_observation_of_state(small_dataset, topo):
    t = small_dataset.trajectories[1]
    for k in (0, 17, len(t) - 1):
        assert sim.observe(t.state(k, topo.n_terminals), topo).poses == pytest.approx(t.y[k], abs=1e-12)


def test_ragged_rejected():
    mk = lambda n: Trajectory(np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 1)),
                              np.zeros((n, 2, 3)), np.zeros((n, 2, 3)))
    with pytest.raises(dataset.RaggedTrajectories):
        Dataset([mk(5), mk(6)])


def test_generation_is_reproducible(topo):
    a = dataset.build_dataset(topo, 2, seed=9, duration_s=2.5, burn_in_s=0.5)
    b = dataset.build_dataset(topo, 2, seed=9, duration_s=2.5, burn_in_s=0.5)
    c = dataset.build_dataset(topo, 2, seed=10, duration_s=2.5, burn_in_s=0.5)
    assert all(np.array_equal(x.y, y.y) for x, y in zip(a.trajectories, b.trajectories))
    assert not np.array_equal(a.trajectories[0].u, c.trajectories[0].u)


def test_metadata(small_dataset, topo):
    m = small_dataset.meta
    assert (m["F_s"], m["F_c"], m["seed"]) == (240, 30, 5)
    assert m["topology_hash"] == topo.topology_hash()
    assert small_dataset.n_samples == 60
