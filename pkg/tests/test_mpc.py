import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import RigidPlant
from dlon import mpc, sim
from dlon.models import CompositeModel
from dlon.scenario import Obstacle, Scenario
from dlon.se2 import Pose2, d_beta

OPEN = Scenario((-1.0, -1.0, 2.0, 2.0))
CFG = mpc.MpcConfig()


def rigid(n_t, held=0):
    return CompositeModel(held, n_t, adaptive=False)


def one_held(pose=(0.0, 0.0, 0.0)):
    return sim.Output([pose], (sim.HELD,))


# ---------------------------------------------------------------- costs and goals

def test_stage_cost_zero_at_goal():
    assert mpc.stage_cost(one_held(), np.zeros(3), np.zeros(3), Pose2(0, 0, 0), CFG) == 0.0


def test_terminal_cost_zero_weight():
    cfg = mpc.MpcConfig(p=0.0)
    assert mpc.terminal_cost(one_held((0.4, -0.2, 2.0)), Pose2(0, 0, 0), cfg) == 0.0


def test_stage_cost_hand_value():
    cfg = mpc.MpcConfig(Q=(1, 1, 1), Q_delta=(1, 1, 1))
    assert mpc.stage_cost(Pose2(0, 0, 0), [1, 0, 0], [0, 0, 0], Pose2(0, 0, 0), cfg) == pytest.approx(2.0)


def test_terminal_cost_scales_metric():
    y = one_held((0.1, 0.2, 0.5))
    assert mpc.terminal_cost(y, Pose2(0, 0, 0), CFG) == pytest.approx(CFG.p * d_beta(y.pose(0), Pose2(0, 0, 0), CFG.beta))


def test_goal_from_receptacle():
    assert mpc.goal_from_receptacle(Pose2(0.3, 0.2, 1.0), Pose2(0, 0, 0)) == Pose2(0.3, 0.2, 1.0)
    g = mpc.goal_from_receptacle(Pose2(0, 0, math.pi / 2), Pose2(0.1, 0, 0))
    assert g.as_array() == pytest.approx([0.0, 0.1, math.pi / 2], abs=1e-15)


@given(st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3)),
       st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3)))
def test_goal_offset_recovered(r, o):
    rec, off = Pose2(*r), Pose2(*o)
    back = rec.inverse().compose(mpc.goal_from_receptacle(rec, off))
    assert back.as_array()[:2] == pytest.approx(off.as_array()[:2], abs=1e-12)
    assert math.cos(back.theta - off.theta) == pytest.approx(1.0, abs=1e-12)


def test_goal_reached_boundaries():
    cfg = mpc.MpcConfig(eps_g=1e-4, beta=0.37)
    assert mpc.goal_reached(Pose2(1, 2, 3), Pose2(1, 2, 3), cfg)
    # translation error sqrt(eps_g) gives d_beta == eps_g exactly
    assert not mpc.goal_reached(Pose2(0.01, 0, 0), Pose2(0, 0, 0), cfg)
    assert d_beta(Pose2(0.01, 0, 0), Pose2(0, 0, 0), 0.37) == pytest.approx(1e-4, rel=1e-12)
    assert mpc.goal_reached(Pose2(0.0099, 0, 0), Pose2(0, 0, 0), cfg)


def test_goal_reached_exact_boundary_value():
    cfg = mpc.MpcConfig(eps_g=0.25, beta=0.0)
    assert not mpc.goal_reached(Pose2(0.5, 0, 0), Pose2(0, 0, 0), cfg)


# ---------------------------------------------------------------- config

def test_config_defaults_and_validation():
    c = mpc.MpcConfig()
    assert c.horizon == 20 and c.dt == pytest.approx(1 / 30) and c.max_tm_steps == 900
    assert np.array_equal(c.Qm, np.diag([0.1, 0.1, 0.05]))
    for bad in (dict(horizon=0), dict(eps_g=0.0), dict(Q=(1, -1, 1)), dict(Q_delta=np.ones((3, 3))), dict(p=-1)):
        with pytest.raises(ValueError):
            mpc.MpcConfig(**bad)


def test_config_from_dict():
    c = mpc.MpcConfig.from_dict({"horizon": 10, "beta": 0.05})
    assert (c.horizon, c.beta) == (10, 0.05)
    with pytest.raises(ValueError):
        mpc.MpcConfig.from_dict({"horizn": 10})
    assert mpc.MpcConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- solve

def test_fixed_point_at_goal():
    sol = mpc.solve(one_held((0.2, 0.1, 0.3)), rigid(1), Pose2(0.2, 0.1, 0.3), OPEN, CFG)
    assert np.linalg.norm(sol.u_sequence) < 1e-6
    assert sol.status == mpc.OPTIMAL


def test_bang_first_input():
    sol = mpc.solve(one_held(), rigid(1), Pose2(0.1, 0, 0), OPEN, CFG)
    assert sol.u0 == pytest.approx([0.05, 0.0, 0.0], abs=1e-6)


def test_solution_shapes_and_bounds():
    y = sim.Output([[0, 0, 0], [0.2, 0.1, 1.0]], (sim.HELD, sim.FREE))
    sol = mpc.solve(y, rigid(2), Pose2(0.3, -0.2, 1.0), OPEN, CFG)
    assert sol.u_sequence.shape == (20, 3)
    assert sol.predicted_y.shape == (21, 2, 3)
    assert np.all(sol.u_sequence >= CFG.u_lo - 1e-12) and np.all(sol.u_sequence <= CFG.u_hi + 1e-12)
    # predicted outputs are the frozen-model rollout
    B = rigid(2).matrix(y)
    Y = y.flat() + CFG.dt * np.vstack([np.zeros(3), np.cumsum(sol.u_sequence, axis=0)]) @ B.T
    Y = Y.reshape(21, 2, 3)
    assert sol.predicted_y[..., :2] == pytest.approx(Y[..., :2], abs=1e-12)
    assert np.cos(sol.predicted_y[..., 2] - Y[..., 2]) == pytest.approx(np.ones((21, 2)), abs=1e-12)


def test_obstacle_deflects_prediction():
    y = sim.Output([[0, 0, 0], [0.2, 0, 0]], (sim.HELD, sim.FREE))
    obstacle = Obstacle(0.3, 0.005, 0.02)
    scenario = Scenario((-1, -1, 2, 2), obstacles=(obstacle,))
    r = obstacle.radius + scenario.terminal_radius + scenario.clearance
    goal = Pose2(0.15, 0, 0)
    margin = lambda Y: r - np.hypot(Y[:, 1, 0] - obstacle.x, Y[:, 1, 1] - obstacle.y)
    free = mpc.solve(y, rigid(2), goal, OPEN, CFG)
    assert margin(free.predicted_y).max() > 0  # the unconstrained plan collides
    con = mpc.solve(y, rigid(2), goal, scenario, CFG)
    assert con.status == mpc.OPTIMAL
    assert margin(con.predicted_y).max() <= 0
    assert np.all(con.constraint_margins[1:] <= 0)


def test_relaxed_status_when_starting_in_violation():
    y = sim.Output([[0, 0, 0], [0.3, 0.01, 0]], (sim.HELD, sim.FREE))
    scenario = Scenario((-1, -1, 2, 2), obstacles=(Obstacle(0.3, 0.0, 0.02),))
    sol = mpc.solve(y, rigid(2), Pose2(0.1, 0, 0), scenario, CFG)
    assert sol.status == mpc.INFEASIBLE_RELAXED
    assert sol.slack.max() > 0


def test_scp_cost_non_increasing():
    rng = np.random.default_rng(4)
    scenario = Scenario((-1, -1, 2, 2), obstacles=(Obstacle(0.25, 0.1, 0.03), Obstacle(0.1, 0.3, 0.03)))
    cfg = mpc.MpcConfig(scp_iterations=6, beta=0.05)
    for _ in range(10):
        y = sim.Output([[0, 0, rng.uniform(-3, 3)], [0.15, 0.05, 0.0]], (sim.HELD, sim.FREE))
        goal = Pose2(*rng.uniform([-0.2, -0.2, -3], [0.2, 0.2, 3]))
        sol = mpc.solve(y, rigid(2), goal, scenario, cfg)
        assert np.all(np.diff(sol.cost_history) <= 1e-12)


def test_warm_start_consistency():
    y = sim.Output([[0, 0, 0.2], [0.2, 0.1, 0]], (sim.HELD, sim.FREE))
    goal = Pose2(0.05, 0.04, 0.5)  # reachable within the horizon, so the tail is at rest
    first = mpc.solve(y, rigid(2), goal, OPEN, CFG)
    again = mpc.solve(y, rigid(2), goal, OPEN, CFG, warm_start=first)
    assert again.u_sequence == pytest.approx(first.u_sequence, abs=1e-5)


def test_no_held_terminal_rejected():
    with pytest.raises(ValueError):
        mpc.solve(sim.Output([[0, 0, 0]], (sim.FREE,)), rigid(1), Pose2(0, 0, 0), OPEN, CFG)


def _closed_loop(goal, cfg=CFG):
    plant = RigidPlant([[0.0, 0.0, 0.0], [0.15, 0.1, 0.3]])
    model = rigid(2)
    warm, u_prev = None, np.zeros(3)
    for k in range(cfg.max_tm_steps + 1):
        y = plant.output()
        if mpc.goal_reached(y.pose(0), goal, cfg):
            return k
        warm = mpc.solve(y, model, goal, OPEN, cfg, warm, u_prev)
        u_prev = warm.u0
        plant.step(u_prev, cfg.dt)
    return None


def test_closed_loop_offset_goal():
    assert _closed_loop(Pose2(0.2, 0.0, 0.0)) is not None


@settings(max_examples=6)
@given(st.floats(0, 0.3), st.floats(-math.pi, math.pi), st.floats(-1, 1))
def test_closed_loop_convergence(dist, bearing, dtheta):
    goal = Pose2(dist * math.cos(bearing), dist * math.sin(bearing), dtheta)
    assert _closed_loop(goal) is not None
