"""Link-tree description of a DLO network.

Links form a tree rooted at terminal 0's link. Every link ``e > 0`` hangs off
the distal node of ``parent[e]`` through one revolute joint, so joint ``j``
belongs to link ``j + 1`` and its angle is the heading of that link relative
to its parent. Link 0 is oriented from terminal 0's tip towards the network;
all other terminal links are leaves oriented outwards.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class TopologyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DlonTopology:
    link_lengths: np.ndarray
    parent: np.ndarray
    rest_angles: np.ndarray
    terminal_links: tuple
    stiffness: np.ndarray
    damping: np.ndarray
    angle_limit: np.ndarray
    friction_torque: np.ndarray
    # viscous table drag per metre of link [N s / m^2]; lumped drag on each terminal block [N s / m]
    drag: float = 0.5
    terminal_drag: float = 0.05
    # pinning spring of a mated terminal, relative to joint stiffness
    pin_stiffness_ratio: float = 100.0
    description: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.link_lengths)
        conv = {
            "link_lengths": (n,),
            "parent": (n,),
            "rest_angles": (n - 1,),
            "stiffness": (n - 1,),
            "damping": (n - 1,),
            "angle_limit": (n - 1,),
            "friction_torque": (n - 1,),
        }
        for name, shape in conv.items():
            dtype = int if name == "parent" else float
            arr = np.array(getattr(self, name), dtype=dtype)
            if arr.ndim == 0 and name != "parent" and name != "link_lengths":
                arr = np.full(shape, float(arr))
            if arr.shape != shape:
                raise TopologyError(f"{name} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "terminal_links", tuple(int(t) for t in self.terminal_links))
        self._validate()

    def _validate(self):
        n = self.n_links
        if n < 2:
            raise TopologyError("need at least two links")
        if np.any(self.link_lengths <= 0):
            raise TopologyError("link lengths must be positive")
        if self.parent[0] != -1:
            raise TopologyError("link 0 must be the root (parent -1)")
        for e in range(1, n):
            if not 0 <= self.parent[e] < e:
                raise TopologyError("parents must precede children (tree in topological order)")
        if np.any(self.angle_limit <= 0) or np.any(self.angle_limit >= math.pi):
            raise TopologyError("angle_limit must lie in (0, pi)")
        if np.any(self.damping <= 0):
            raise TopologyError("joint damping must be positive")
        if np.any(self.stiffness < 0) or np.any(self.friction_torque < 0):
            raise TopologyError("stiffness and friction must be non-negative")
        if len(self.terminal_links) < 2:
            raise TopologyError("a network needs at least two terminals")
        if self.terminal_links[0] != 0:
            raise TopologyError("terminal 0 must sit on the root link")
        if len(set(self.terminal_links)) != len(self.terminal_links):
            raise TopologyError("terminal links must be distinct")
        has_child = np.zeros(n, dtype=bool)
        has_child[self.parent[1:]] = True
        leaves = {e for e in range(1, n) if not has_child[e]}
        if leaves != set(self.terminal_links[1:]):
            raise TopologyError("every branch must end in exactly one terminal link")
        if sum(1 for e in range(1, n) if self.parent[e] == 0) != 1:
            raise TopologyError("terminal 0's link must have exactly one child")

    @property
    def n_links(self) -> int:
        return len(self.link_lengths)

    @property
    def n_joints(self) -> int:
        return self.n_links - 1

    @property
    def n_terminals(self) -> int:
        return len(self.terminal_links)

    @cached_property
    def anc_link(self) -> np.ndarray:
        """``anc_link[e, a] = 1`` when link ``a`` is ``e`` or one of its ancestors."""
        n = self.n_links
        m = np.zeros((n, n))
        for e in range(n):
            a = e
            while a >= 0:
                m[e, a] = 1.0
                a = self.parent[a]
        return m

    @cached_property
    def anc_joint(self) -> np.ndarray:
        """``(n_links, n_joints)``: joints on the path from link 0 to each link."""
        return self.anc_link[:, 1:].copy()

    @cached_property
    def subtree(self) -> np.ndarray:
        """``(n_joints, n_links)``: links moved by a joint when link 0 is fixed."""
        return self.anc_joint.T.copy()

    def side_signs(self, terminal: int) -> np.ndarray:
        """Signed ``(n_joints, n_links)`` map of the links a joint rotates while ``terminal`` is fixed.

        Entry ``(j, e)`` is the angular rate link ``e`` picks up per unit rate of
        joint ``j``: +1 for links beyond the joint, -1 when the fixed terminal is
        itself beyond the joint and the rest of the tree swings instead.
        """
        cache = self.__dict__.setdefault("_side_cache", {})
        if terminal not in cache:
            link = self.terminal_links[terminal]
            held_beyond = self.anc_link[link, 1:] > 0
            s = np.where(held_beyond[:, None], -(1.0 - self.subtree), self.subtree)
            s.setflags(write=False)
            cache[terminal] = s
        return cache[terminal]

    @property
    def total_length(self) -> float:
        return float(np.sum(self.link_lengths))

    def to_dict(self) -> dict:
        return {
            "link_lengths": self.link_lengths.tolist(),
            "parent": self.parent.tolist(),
            "rest_angles": self.rest_angles.tolist(),
            "terminal_links": list(self.terminal_links),
            "stiffness": self.stiffness.tolist(),
            "damping": self.damping.tolist(),
            "angle_limit": self.angle_limit.tolist(),
            "friction_torque": self.friction_torque.tolist(),
            "drag": self.drag,
            "terminal_drag": self.terminal_drag,
            "pin_stiffness_ratio": self.pin_stiffness_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DlonTopology":
        return cls(**d)

    def topology_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def scaled(self, stiffness: float = 1.0, friction: float = 1.0) -> "DlonTopology":
        d = self.to_dict()
        d["stiffness"] = (self.stiffness * stiffness).tolist()
        d["friction_torque"] = (self.friction_torque * friction).tolist()
        return DlonTopology.from_dict(d)


def branched_topology(
    branch_links=(11, 11, 5),
    branch_angles=(0.0, math.pi / 2),
    link_length: float = 0.025,
    stiffness: float = 0.05,
    damping: float = 0.01,
    angle_limit: float = 0.6,
    friction_torque: float = 0.002,
    drag: float = 0.5,
    terminal_drag: float = 0.05,
    pin_stiffness_ratio: float = 100.0,
) -> DlonTopology:
    """Star-shaped network: branch 0 runs from terminal 0 to a junction, the others fan out from it.

    ``branch_angles[i]`` is the rest angle of branch ``i + 1`` at the junction,
    measured from the direction of branch 0 as it arrives there.
    """
    branch_links = [int(b) for b in branch_links]
    if len(branch_links) < 2 or any(b < 1 for b in branch_links):
        raise TopologyError("need >= 2 branches of >= 1 link")
    if len(branch_angles) != len(branch_links) - 1:
        raise TopologyError("need one junction angle per branch after the first")
    parent = [-1]
    rest = []
    for _ in range(branch_links[0] - 1):
        parent.append(len(parent) - 1)
        rest.append(0.0)
    junction = len(parent) - 1
    terminals = [0]
    for nb, angle in zip(branch_links[1:], branch_angles):
        prev = junction
        for i in range(nb):
            parent.append(prev)
            rest.append(float(angle) if i == 0 else 0.0)
            prev = len(parent) - 1
        terminals.append(prev)
    n = len(parent)
    if branch_links[0] == 1 and len(branch_links) > 2:
        raise TopologyError("branch 0 needs at least two links when more than one branch fans out")
    return DlonTopology(
        link_lengths=np.full(n, link_length),
        parent=np.array(parent),
        rest_angles=np.array(rest),
        terminal_links=tuple(terminals),
        stiffness=np.full(n - 1, stiffness),
        damping=np.full(n - 1, damping),
        angle_limit=np.full(n - 1, angle_limit),
        friction_torque=np.full(n - 1, friction_torque),
        drag=drag,
        terminal_drag=terminal_drag,
        pin_stiffness_ratio=pin_stiffness_ratio,
        description={
            "branch_links": branch_links,
            "branch_angles": [float(a) for a in branch_angles],
            "link_length": link_length,
        },
    )


def chain_topology(n_links: int = 2, link_length: float = 0.025, **joint_params) -> DlonTopology:
    """Open chain with a terminal at each end."""
    if n_links < 2:
        raise TopologyError("a chain needs at least two links")
    params = dict(stiffness=0.05, damping=0.01, angle_limit=0.6, friction_torque=0.002,
                  drag=0.5, terminal_drag=0.05, pin_stiffness_ratio=100.0)
    params.update(joint_params)
    nj = n_links - 1
    return DlonTopology(
        link_lengths=np.full(n_links, link_length),
        parent=np.arange(-1, n_links - 1),
        rest_angles=np.zeros(nj),
        terminal_links=(0, n_links - 1),
        stiffness=np.full(nj, params["stiffness"]),
        damping=np.full(nj, params["damping"]),
        angle_limit=np.full(nj, params["angle_limit"]),
        friction_torque=np.full(nj, params["friction_torque"]),
        drag=params["drag"],
        terminal_drag=params["terminal_drag"],
        pin_stiffness_ratio=params["pin_stiffness_ratio"],
    )
