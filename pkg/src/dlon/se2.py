"""SE(2) poses, world-frame twists and the weighted pose metric."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, TWO_PI)
    if wrapped <= 0.0:
        wrapped += TWO_PI
    return wrapped - math.pi


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_angle`."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.fmod(theta + np.pi, TWO_PI)
    wrapped = np.where(wrapped <= 0.0, wrapped + TWO_PI, wrapped)
    return wrapped - np.pi


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @classmethod
    def from_array(cls, a) -> "Pose2":
        return cls(a[0], a[1], a[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def compose(self, other: "Pose2") -> "Pose2":
        """Group product ``self * other`` (``other`` expressed in this frame)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)


@dataclass(frozen=True)
class Twist2:
    vx: float
    vy: float
    omega: float

    def __post_init__(self):
        for name in ("vx", "vy", "omega"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"twist component {name} must be finite, got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, a) -> "Twist2":
        return cls(a[0], a[1], a[2])

    @classmethod
    def zero(cls) -> "Twist2":
        return cls(0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega])


def d_beta(p1: Pose2, p2: Pose2, beta: float) -> float:
    """Squared translation distance plus ``beta`` times the squared heading chord."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    dx = p1.x - p2.x
    dy = p1.y - p2.y
    dc = math.cos(p1.theta) - math.cos(p2.theta)
    ds = math.sin(p1.theta) - math.sin(p2.theta)
    return dx * dx + dy * dy + beta * (dc * dc + ds * ds)


def d_beta_array(p1: np.ndarray, p2: np.ndarray, beta: float) -> np.ndarray:
    """:func:`d_beta` on ``(..., 3)`` arrays of raw (x, y, theta)."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    dxy = p1[..., :2] - p2[..., :2]
    dc = np.cos(p1[..., 2]) - np.cos(p2[..., 2])
    ds = np.sin(p1[..., 2]) - np.sin(p2[..., 2])
    return np.sum(dxy * dxy, axis=-1) + beta * (dc * dc + ds * ds)


def integrate_pose(p: Pose2, u: Twist2, dt: float) -> Pose2:
    """Zero-order-hold step of a world-frame twist (additive, not the Lie exponential)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return Pose2(p.x + dt * u.vx, p.y + dt * u.vy, p.theta + dt * u.omega)
