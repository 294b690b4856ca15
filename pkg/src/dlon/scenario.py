"""Installation problem instances: workspace, obstacles, receptacles and clearances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dlon.se2 import Pose2


@dataclass(frozen=True)
class Obstacle:
    x: float
    y: float
    radius: float


@dataclass(frozen=True)
class Receptacle:
    pose: Pose2
    offset: Pose2
    radius: float = 0.03

    @property
    def goal(self) -> Pose2:
        return self.pose.compose(self.offset)


@dataclass(frozen=True)
class Scenario:
    """``workspace`` is ``(xmin, ymin, xmax, ymax)``; receptacle ``i`` belongs to terminal ``i``.

    Receptacles double as circular obstacles, which is all the easy problems contain.
    """

    workspace: tuple
    obstacles: tuple = ()
    receptacles: tuple = ()
    terminal_radius: float = 0.0318
    clearance: float = 0.02
    initial_pose: Pose2 = field(default_factory=lambda: Pose2(0.0, 0.0, 0.0))
    initial_angles: tuple = ()
    name: str = "scenario"

    def __post_init__(self):
        xmin, ymin, xmax, ymax = (float(v) for v in self.workspace)
        if not (xmin < xmax and ymin < ymax):
            raise ValueError("workspace must be a non-empty rectangle")
        object.__setattr__(self, "workspace", (xmin, ymin, xmax, ymax))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "receptacles", tuple(self.receptacles))
        if self.terminal_radius <= 0 or self.clearance <= 0:
            raise ValueError("terminal radius and clearance must be positive")
        for o in self.all_obstacles():
            if o.radius <= 0:
                raise ValueError("obstacle radii must be positive")
        for r in self.receptacles:
            if not self.contains(r.goal.x, r.goal.y):
                raise ValueError(f"goal {r.goal} lies outside the workspace")

    def all_obstacles(self) -> list:
        return list(self.obstacles) + [Obstacle(r.pose.x, r.pose.y, r.radius) for r in self.receptacles]

    def obstacle_array(self) -> np.ndarray:
        """``(n_o, 3)`` rows of (x, y, radius), explicit obstacles first, then receptacles."""
        obs = self.all_obstacles()
        if not obs:
            return np.zeros((0, 3))
        return np.array([[o.x, o.y, o.radius] for o in obs])

    def safety_radii(self) -> np.ndarray:
        """r_t + r_o + r_eps for every obstacle."""
        return self.obstacle_array()[:, 2] + self.terminal_radius + self.clearance

    def goals(self) -> list:
        return [r.goal for r in self.receptacles]

    def contains(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.workspace
        return xmin <= x <= xmax and ymin <= y <= ymax

    def workspace_margin(self, xy: np.ndarray) -> np.ndarray:
        """Signed distance outside W for ``(..., 2)`` points: negative inside."""
        xy = np.asarray(xy, dtype=float)
        xmin, ymin, xmax, ymax = self.workspace
        dx = np.maximum(xmin - xy[..., 0], xy[..., 0] - xmax)
        dy = np.maximum(ymin - xy[..., 1], xy[..., 1] - ymax)
        outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
        inside = np.minimum(np.maximum(dx, dy), 0.0)
        return outside + inside
