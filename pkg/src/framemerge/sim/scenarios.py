"""Bundled and user-supplied simulation scenarios.

A scenario is a JSON document holding a world spec, a list of runs
(2-D waypoints, sensor height and vertical fov) and the merge radius. The
scenario seed varies the wall roughness and the range noise; run ``i``
draws its noise from ``seed * len(runs) + i``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..geometry import Transform
from .lidar import KeyframeConfig, ScanConfig, SimRun, ground_truth_transform, simulate_run
from .world import World, WorldSpec, generate_world

BUNDLED = ("fig3", "fig4")


@dataclass(frozen=True)
class RunSpec:
    name: str
    waypoints: tuple
    sensor_height: float = 1.0
    vertical_fov: float = 30.0
    horizontal_step: float = 0.7
    noise_sigma: float = 0.02

    @classmethod
    def from_dict(cls, d: dict) -> RunSpec:
        wps = tuple(tuple(float(c) for c in p[:2]) for p in d["waypoints"])
        if len(wps) < 2:
            raise ValueError(f"run {d.get('name')!r} needs at least two waypoints")
        return cls(
            name=str(d["name"]),
            waypoints=wps,
            sensor_height=float(d.get("sensor_height", 1.0)),
            vertical_fov=float(d.get("vertical_fov", 30.0)),
            horizontal_step=float(d.get("horizontal_step", 0.7)),
            noise_sigma=float(d.get("noise_sigma", 0.02)),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "waypoints": [list(p) for p in self.waypoints],
            "sensor_height": self.sensor_height,
            "vertical_fov": self.vertical_fov,
            "horizontal_step": self.horizontal_step,
            "noise_sigma": self.noise_sigma,
        }

    def waypoints_3d(self) -> np.ndarray:
        wp = np.asarray(self.waypoints, dtype=np.float64)
        return np.column_stack([wp, np.full(len(wp), self.sensor_height)])


@dataclass(frozen=True)
class Scenario:
    name: str
    world: WorldSpec
    runs: tuple
    radius: float = 10.0
    description: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        runs = tuple(RunSpec.from_dict(r) for r in d["runs"])
        if len(runs) < 1:
            raise ValueError("scenario needs at least one run")
        radius = float(d.get("radius", 10.0))
        if not radius > 0:
            raise ValueError("scenario radius must be positive")
        return cls(
            name=str(d.get("name", "scenario")),
            world=WorldSpec.from_dict(d["world"]),
            runs=runs,
            radius=radius,
            description=str(d.get("description", "")),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "radius": self.radius,
            "world": self.world.to_dict(),
            "runs": [r.to_dict() for r in self.runs],
        }

    def world_for(self, seed: int) -> WorldSpec:
        d = self.world.to_dict()
        d["seed"] = self.world.seed + int(seed)
        return WorldSpec.from_dict(d)

    def build(self, seed: int = 0, keyframes: KeyframeConfig = KeyframeConfig()) -> SimulatedScenario:
        world = generate_world(self.world_for(seed))
        runs = []
        for i, r in enumerate(self.runs):
            cfg = ScanConfig(
                vertical_fov=r.vertical_fov,
                horizontal_step=r.horizontal_step,
                noise_sigma=r.noise_sigma,
                seed=int(seed) * len(self.runs) + i,
            )
            runs.append(simulate_run(world, r.waypoints_3d(), cfg, keyframes=keyframes))
        return SimulatedScenario(self, int(seed), world, runs)


@dataclass
class SimulatedScenario:
    scenario: Scenario
    seed: int
    world: World
    runs: list

    def ground_truths(self) -> list[Transform]:
        """Transforms taking run ``i + 1``'s map frame into run 0's."""
        return [ground_truth_transform(self.runs[0], r) for r in self.runs[1:]]


def load_scenario(name_or_path) -> Scenario:
    """A bundled scenario by name (``fig3``, ``fig4``) or a JSON file path."""
    if str(name_or_path) in BUNDLED:
        text = resources.files("framemerge.scenarios").joinpath(f"{name_or_path}.json").read_text()
        source = str(name_or_path)
    else:
        path = Path(name_or_path)
        text = path.read_text(encoding="utf-8")
        source = str(path)
    try:
        return Scenario.from_dict(json.loads(text))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{source}: invalid scenario: {exc}") from exc


def simulate_scenario(name_or_path, seed: int = 0) -> SimulatedScenario:
    return load_scenario(name_or_path).build(seed)


__all__ = ["BUNDLED", "RunSpec", "Scenario", "SimRun", "SimulatedScenario", "load_scenario", "simulate_scenario"]
