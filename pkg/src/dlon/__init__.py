"""Planar DLO-network simulation, output-dynamics identification and adaptive MPC."""

from dlon.se2 import Pose2, Twist2, d_beta, integrate_pose, normalize_angle

__all__ = ["Pose2", "Twist2", "d_beta", "integrate_pose", "normalize_angle"]
__version__ = "0.1.0"
