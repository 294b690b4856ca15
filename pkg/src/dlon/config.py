"""Scenario files: TOML tables for the workspace, network, receptacles, obstacles and controller."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import tomli

from dlon.mpc import MpcConfig
from dlon.planner import ModelConfig
from dlon.scenario import Obstacle, Receptacle, Scenario
from dlon.se2 import Pose2
from dlon.topology import DlonTopology, branched_topology

BUILTIN = ("easy", "rotated", "obstacles", "wall")
_TOPOLOGY_KEYS = {"branch_links", "branch_angles", "link_length", "stiffness", "damping", "angle_limit",
                  "friction_torque", "drag", "terminal_drag", "pin_stiffness_ratio"}

_DATASET_KEYS = {"n_trajectories", "duration_s", "burn_in_s", "u_bounds"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    scenario: Scenario
    topology: DlonTopology
    controller: MpcConfig
    model: ModelConfig
    collection: dict
    source: str
    raw: dict


def builtin_path(name: str):
    return resources.files("dlon") / "scenarios" / f"{name}.toml"


def read_table(scenario) -> tuple:
    """Parsed TOML for a built-in name or a file path, plus a description of its source."""
    p = Path(str(scenario))
    if p.suffix == ".toml" or p.exists():
        if not p.exists():
            raise FileNotFoundError(f"scenario file {p} does not exist")
        return tomli.loads(p.read_text()), str(p)
    if scenario in BUILTIN:
        return tomli.loads(builtin_path(scenario).read_text()), f"builtin:{scenario}"
    raise FileNotFoundError(f"unknown scenario {scenario!r}; built-ins are {', '.join(BUILTIN)}")


def parse_override(text: str) -> tuple:
    """``section.key=value`` with a TOML value; bare words fall back to strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        parsed = tomli.loads(f"v = {value.strip()}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value.strip()
    return key.split("."), parsed


def apply_overrides(table: dict, overrides=()) -> dict:
    out = copy.deepcopy(table)
    for item in overrides:
        path, value = parse_override(item)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-table value")
        node[path[-1]] = value
    return out


def _pose(v, what: str) -> Pose2:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ConfigError(f"{what} must be [x, y, theta]")
    return Pose2(float(v[0]), float(v[1]), float(v[2]))


def build(table: dict, source: str = "<table>") -> ExperimentConfig:
    try:
        ws = table["workspace"]["bounds"]
    except KeyError:
        raise ConfigError("scenario needs [workspace] bounds") from None
    net = dict(table.get("network", {}))
    pose0 = _pose(net.pop("initial_pose", [0.0, 0.0, 0.0]), "network.initial_pose")
    angles = tuple(float(a) for a in net.pop("initial_angles", ()))
    unknown = set(net) - _TOPOLOGY_KEYS
    if unknown:
        raise ConfigError(f"unknown network keys: {sorted(unknown)}")
    topo = branched_topology(**net)
    clear = table.get("clearance", {})
    receptacles = tuple(
        Receptacle(_pose(r["pose"], "receptacle pose"), _pose(r.get("offset", [0, 0, 0]), "receptacle offset"),
                   float(r.get("radius", 0.03)))
        for r in table.get("receptacles", [])
    )
    obstacles = tuple(Obstacle(float(o["x"]), float(o["y"]), float(o["radius"])) for o in table.get("obstacles", []))
    if angles and len(angles) != topo.n_joints:
        raise ConfigError(f"initial_angles needs {topo.n_joints} entries")
    if receptacles and len(receptacles) != topo.n_terminals:
        raise ConfigError(f"{len(receptacles)} receptacles for {topo.n_terminals} terminals")
    name = str(table.get("name", Path(source).stem))
    scenario = Scenario(
        workspace=tuple(ws), obstacles=obstacles, receptacles=receptacles,
        terminal_radius=float(clear.get("terminal_radius", 0.0318)), clearance=float(clear.get("clearance", 0.02)),
        initial_pose=pose0, initial_angles=angles, name=name,
    )
    controller = MpcConfig.from_dict(dict(table.get("controller", {})))
    model = ModelConfig.from_dict(dict(table.get("model", {})))
    collection = dict(table.get("dataset", {}))
    unknown = set(collection) - _DATASET_KEYS
    if unknown:
        raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
    return ExperimentConfig(name, scenario, topo, controller, model, collection, source, table)


def load_config(scenario, overrides=()) -> ExperimentConfig:
    table, source = read_table(scenario)
    return build(apply_overrides(table, overrides), source)
