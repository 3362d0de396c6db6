"""Event-triggered map merging and its report."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .descriptors import DescriptorRecord, estimate_yaw, shift_orientation
from .geometry import (
    Trajectory,
    Transform,
    as_points,
    se3_apply,
    transform_errors,
)
from .overlap import OverlapMatch, build_index, initial_transform, query_best_pair
from .registration import (
    RegistrationParams,
    SphereRegion,
    gicp_register,
    prepare_cloud,
    sample_sphere,
    CaptureRangeError,
)

STAGES = ("query", "yaw", "sphere", "registration")


class MergeError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str, reports=None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message
        self.reports = list(reports or [])


@dataclass
class RobotRun:
    map: np.ndarray
    trajectory: Trajectory
    records: list

    def __post_init__(self):
        self.map = as_points(self.map)
        self.records = list(self.records)
        traj = self.trajectory
        for r in self.records:
            try:
                p = traj.position_at(r.timestep)
            except KeyError:
                raise ValueError(f"record timestep {r.timestep} missing from trajectory") from None
            if not np.allclose(p, r.position, atol=1e-6):
                raise ValueError(f"record {r.timestep} position disagrees with trajectory")


@dataclass
class MergeReport:
    transform: Transform
    points_m1: int
    points_m2: int
    trajectory_lengths: tuple
    timings: dict
    sphere_radius: float
    match: OverlapMatch
    initial_transform: Transform
    yaw: float
    registration: dict = field(default_factory=dict)
    overlap_percent: float | None = None
    t_e: float | None = None
    r_e: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "transform": self.transform.to_list(),
            "points_m1": self.points_m1,
            "points_m2": self.points_m2,
            "trajectory_lengths": list(self.trajectory_lengths),
            "timings": dict(self.timings),
            "sphere_radius": self.sphere_radius,
            "match": self.match.to_dict(),
            "initial_transform": self.initial_transform.to_list(),
            "yaw": self.yaw,
            "registration": dict(self.registration),
            "config": dict(self.config),
        }
        for key in ("overlap_percent", "t_e", "r_e"):
            value = getattr(self, key)
            if value is not None:
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MergeReport:
        return cls(
            transform=Transform.from_matrix(d["transform"]),
            points_m1=int(d["points_m1"]),
            points_m2=int(d["points_m2"]),
            trajectory_lengths=tuple(d["trajectory_lengths"]),
            timings=dict(d["timings"]),
            sphere_radius=float(d["sphere_radius"]),
            match=OverlapMatch.from_dict(d["match"]),
            initial_transform=Transform.from_matrix(d["initial_transform"]),
            yaw=float(d["yaw"]),
            registration=dict(d.get("registration", {})),
            overlap_percent=d.get("overlap_percent"),
            t_e=d.get("t_e"),
            r_e=d.get("r_e"),
            config=dict(d.get("config", {})),
        )


def compute_overlap_percent(m1, m2, gt: Transform, voxel: float = 0.5) -> float:
    """Shared occupied voxels over the smaller map's occupied voxels, in percent."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    a = as_points(m1)
    b = as_points(m2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("overlap of an empty cloud is undefined")
    va = np.unique(np.floor(a / voxel).astype(np.int64), axis=0)
    vb = np.unique(np.floor(se3_apply(gt, b) / voxel).astype(np.int64), axis=0)
    both = np.concatenate([va, vb], axis=0)
    shared = len(both) - len(np.unique(both, axis=0))
    return 100.0 * shared / min(len(va), len(vb))


def merge_pair(
    own: RobotRun,
    incoming: RobotRun,
    radius: float = 10.0,
    params: RegistrationParams = RegistrationParams(),
    ground_truth: Transform | None = None,
    raw_initial: bool = False,
    overlap_voxel: float | None = None,
):
    """Merge ``incoming`` into ``own``'s frame; returns ``(merged_map, report)``."""
    if not own.records or not incoming.records:
        raise MergeError("query", "both runs need descriptor records")
    timings = {}
    t_start = time.perf_counter()

    stage = "query"
    try:
        t0 = time.perf_counter()
        match = query_best_pair(build_index(own.records), incoming.records)
        timings["query"] = time.perf_counter() - t0

        stage = "yaw"
        t0 = time.perf_counter()
        w_own = next(r.w for r in own.records if r.timestep == match.own_timestep)
        w_in = next(r.w for r in incoming.records if r.timestep == match.incoming_timestep)
        # The rotation that carries the incoming scan onto the own scan.
        yaw = estimate_yaw(w_in, w_own)
        guess = initial_transform(match, yaw, raw=raw_initial)
        timings["yaw"] = time.perf_counter() - t0

        stage = "sphere"
        t0 = time.perf_counter()
        s1 = sample_sphere(own.map, SphereRegion(match.own_position, radius))
        s2 = sample_sphere(incoming.map, SphereRegion(match.incoming_position, radius))
        target = prepare_cloud(s1, params)
        source = prepare_cloud(s2, params)
        timings["sphere"] = time.perf_counter() - t0

        stage = "registration"
        t0 = time.perf_counter()
        result = gicp_register(source, target, guess, params)
        if result.fitness < params.min_fitness:
            raise CaptureRangeError(
                f"initial guess outside capture range (fitness {result.fitness:.2f} < {params.min_fitness})"
            )
        timings["registration"] = time.perf_counter() - t0
    except MergeError:
        raise
    except Exception as exc:
        raise MergeError(stage, str(exc)) from exc

    t12 = result.transform
    timings["total"] = time.perf_counter() - t_start
    # The union is bookkeeping on the full maps, timed apart from the alignment.
    t0 = time.perf_counter()
    merged = np.concatenate([own.map, se3_apply(t12, incoming.map)], axis=0)
    timings["union"] = time.perf_counter() - t0

    report = MergeReport(
        transform=t12,
        points_m1=len(own.map),
        points_m2=len(incoming.map),
        trajectory_lengths=(own.trajectory.length, incoming.trajectory.length),
        timings=timings,
        sphere_radius=float(radius),
        match=match,
        initial_transform=guess,
        yaw=yaw,
        registration={
            "iterations": result.iterations,
            "converged": result.converged,
            "final_cost": result.final_cost,
            "correspondence_count": result.correspondence_count,
            "fitness": result.fitness,
            "submap_points": [len(s1), len(s2)],
        },
        config={"radius": float(radius), "raw_initial": raw_initial, **params.to_dict()},
    )
    if ground_truth is not None:
        err = transform_errors(ground_truth, t12)
        report.t_e = err.translation_error
        report.r_e = err.rotation_error
        report.registration["frobenius_residual"] = err.frobenius_residual
        if overlap_voxel:
            report.overlap_percent = compute_overlap_percent(own.map, incoming.map, ground_truth, overlap_voxel)
    return merged, report


def absorb(own: RobotRun, incoming: RobotRun, t12: Transform) -> RobotRun:
    """Accumulated run after merging: union of maps, trajectories and records.

    Incoming timesteps are shifted past the own ones; incoming orientation
    descriptors are rotated into the own frame.
    """
    offset = int(own.trajectory.timesteps.max()) + 1 if len(own.trajectory) else 0
    moved = incoming.trajectory.transformed(t12, offset)
    traj = Trajectory(
        np.concatenate([own.trajectory.timesteps, moved.timesteps]),
        np.concatenate([own.trajectory.positions, moved.positions]),
        np.concatenate([own.trajectory.yaws, moved.yaws]),
    )
    records = list(own.records)
    for r in incoming.records:
        records.append(
            DescriptorRecord(
                r.q,
                shift_orientation(r.w, t12.yaw),
                se3_apply(t12, r.position[None])[0],
                r.timestep + offset,
            )
        )
    merged = np.concatenate([own.map, se3_apply(t12, incoming.map)], axis=0)
    return RobotRun(merged, traj, records)


def merge_recursive(runs, radius: float = 10.0, params: RegistrationParams = RegistrationParams(), ground_truths=None):
    """Fold ``merge_pair`` left to right; one report per fold step.

    ``ground_truths[i]``, when given, maps run ``i + 1`` into run 0's frame.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise ValueError("need at least two runs to merge")
    acc = runs[0]
    reports = []
    for i, nxt in enumerate(runs[1:]):
        gt = ground_truths[i] if ground_truths is not None else None
        try:
            merged, report = merge_pair(acc, nxt, radius, params, gt)
        except MergeError as exc:
            exc.reports = reports
            raise
        reports.append(report)
        acc = absorb(acc, nxt, report.transform)
    return acc.map, reports
