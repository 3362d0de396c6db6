"""Spinning 16-channel LiDAR model and ground-truthed robot runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import LineString

from ..descriptors import DescriptorRecord, extract_descriptors
from ..geometry import Trajectory, Transform, rot_z, se3_apply, se3_compose, se3_inverse
from ..pipeline import RobotRun
from ..projection import DepthImage, spherical_project
from .world import World

SENSOR_FOVS = (20.0, 30.0)


@dataclass(frozen=True)
class ScanConfig:
    channels: int = 16
    vertical_fov: float = 30.0
    horizontal_step: float = 0.7
    max_range: float = 50.0
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.channels != 16:
            raise ValueError("only 16-channel sensors are modelled")
        if self.vertical_fov not in SENSOR_FOVS:
            raise ValueError(f"vertical_fov must be one of {SENSOR_FOVS}")
        if self.horizontal_step <= 0 or self.max_range <= 0 or self.noise_sigma < 0:
            raise ValueError("invalid scan configuration")

    @property
    def azimuth_count(self) -> int:
        return int(round(360.0 / self.horizontal_step))

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the sensor frame, channel-major."""
        half = np.radians(self.vertical_fov) / 2.0
        elev = np.linspace(-half, half, self.channels)
        n = self.azimuth_count
        az = (np.arange(n) + 0.5) * (2 * np.pi / n)
        e, a = np.meshgrid(elev, az, indexing="ij")
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return d.reshape(-1, 3)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> ScanConfig:
        return cls(**d)


@dataclass(frozen=True)
class KeyframeConfig:
    """How descriptor records are cut from a run.

    A keyframe's depth image is rendered from that step's scan alone. The
    scan is densified by interpolating along each azimuth between adjacent
    rings, turned to the map axes and viewed from ``view_height`` above the
    floor. The common ``vertical_fov`` and the edge filling in
    :func:`fill_edges` keep images comparable across sensors with different
    ring layouts and mounting heights.
    """

    distance: float = 2.0
    view_height: float = 1.0
    vertical_fov: float = 20.0
    max_range: float = 50.0
    upsample: int = 16
    max_jump: float = 1.0

    def __post_init__(self):
        if self.distance <= 0 or self.view_height <= 0 or self.upsample < 1 or self.max_jump < 0:
            raise ValueError("invalid keyframe configuration")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SimRun:
    run: RobotRun
    true_poses: list
    frame_offset: Transform
    scans: list = field(repr=False)
    world_id: str = ""
    config: ScanConfig = field(default_factory=ScanConfig)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)

    def local_pose(self, i: int) -> Transform:
        return se3_compose(self.frame_offset, self.true_poses[i])


def scan(world: World, pose: Transform, config: ScanConfig, pose_index: int = 0) -> np.ndarray:
    """One revolution in the sensor frame; misses are dropped.

    Noise for ray ``j`` of pose ``i`` comes from a stream keyed by
    ``(seed, i)`` so scans do not depend on evaluation order.
    """
    dirs = config.ray_directions()
    ranges = world.cast(pose.translation, dirs @ pose.rotation.T, config.max_range)
    noise = np.random.default_rng([config.seed, pose_index]).standard_normal(len(dirs))
    hit = np.isfinite(ranges)
    r = ranges[hit] + config.noise_sigma * noise[hit]
    r = np.clip(r, 1e-3, config.max_range)
    return dirs[hit] * r[:, None]


def range_image(points, config: ScanConfig) -> np.ndarray:
    """Sensor-frame points back on their (ring, azimuth) grid; NaN where no return."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = config.azimuth_count
    r = np.linalg.norm(pts, axis=1)
    step = np.radians(config.vertical_fov) / (config.channels - 1)
    elev = np.arcsin(np.clip(pts[:, 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    ring = np.rint(elev / step + (config.channels - 1) / 2.0).astype(np.int64)
    col = np.floor(np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi) / (2 * np.pi / n)).astype(np.int64)
    ok = (ring >= 0) & (ring < config.channels) & (r > 0)
    img = np.full((config.channels, n), np.nan)
    img[ring[ok], col[ok] % n] = r[ok]
    return img


def densify(ranges: np.ndarray, config: ScanConfig, upsample: int, max_jump: float) -> np.ndarray:
    """Points interpolated between vertically adjacent returns of one scan.

    Neighbours whose ranges differ by more than ``max_jump`` times the
    nearer one are taken to lie on different surfaces and left unjoined.
    """
    half = np.radians(config.vertical_fov) / 2.0
    elev = np.linspace(-half, half, config.channels)
    n = ranges.shape[1]
    az = (np.arange(n) + 0.5) * (2 * np.pi / n)
    t = np.arange(upsample) / upsample
    r0, r1 = ranges[:-1], ranges[1:]
    with np.errstate(invalid="ignore"):
        joined = np.abs(r0 - r1) <= max_jump * np.fmin(r0, r1)
    keep = np.repeat(joined[:, None, :], upsample, axis=1)
    keep[:, 0, :] = np.isfinite(r0)
    e = np.concatenate([(elev[:-1, None] + t[None, :] * (elev[1] - elev[0])).ravel(), elev[-1:]])
    mid = r0[:, None, :] + t[None, :, None] * (r1 - r0)[:, None, :]
    mid[:, 0, :] = r0
    r = np.concatenate([mid.reshape(-1, n), ranges[-1:]])
    keep = np.concatenate([keep.reshape(-1, n), np.isfinite(ranges[-1:])])
    e, a = np.meshgrid(e, az, indexing="ij")
    d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    return d[keep] * r[keep][:, None]


def keyframe_cloud(points, pose: Transform, config: ScanConfig, keyframes: KeyframeConfig) -> np.ndarray:
    """Densified scan on the map axes, centred on the virtual viewpoint."""
    dense = densify(range_image(points, config), config, keyframes.upsample, keyframes.max_jump)
    cloud = dense @ pose.rotation.T
    # Walls never reach below the floor, so the lowest returns are floor hits.
    z = cloud[:, 2]
    if len(z) == 0:
        return cloud
    floor = np.median(z[z < z.min() + 0.1])
    return cloud - np.array([0.0, 0.0, floor + keyframes.view_height])


def fill_edges(ranges: np.ndarray) -> np.ndarray:
    """Copy each column's outermost return over the empty cells beyond it.

    Runs of empty cells touching the top or bottom row are parts of the view
    the sensor's own rings never covered, not open space.
    """
    out = np.array(ranges, dtype=np.float64)
    hit = out > 0
    for c in np.flatnonzero(hit.any(axis=0)):
        rows = np.flatnonzero(hit[:, c])
        out[: rows[0], c] = out[rows[0], c]
        out[rows[-1] + 1 :, c] = out[rows[-1], c]
    return out


def keyframe_record(points, pose: Transform, k: int, config: ScanConfig, keyframes: KeyframeConfig) -> DescriptorRecord:
    img = spherical_project(
        keyframe_cloud(points, pose, config, keyframes),
        16,
        256,
        keyframes.vertical_fov,
        keyframes.max_range,
    )
    img = DepthImage(fill_edges(img.ranges), img.vertical_fov, img.max_range)
    q, w = extract_descriptors(img)
    return DescriptorRecord(q, w, pose.translation, k)


def keyframe_steps(traveled: np.ndarray, distance: float) -> list[int]:
    steps, last = [], -np.inf
    for i, d in enumerate(traveled):
        if d - last >= distance - 1e-9:
            steps.append(i)
            last = d
    return steps


def _resample(waypoints: np.ndarray, spacing: float = 1.0):
    seg = np.diff(waypoints, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len <= 0):
        raise ValueError("consecutive waypoints must differ")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.arange(0.0, cum[-1] + 1e-9, spacing)
    if cum[-1] - s[-1] > 1e-6:
        s = np.append(s, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / seg_len[idx]
    pos = waypoints[idx] + frac[:, None] * seg[idx]
    yaw = np.arctan2(seg[idx, 1], seg[idx, 0])
    return pos, yaw, s


def simulate_run(
    world: World,
    waypoints,
    config: ScanConfig,
    local_frame: Transform | None = None,
    keyframes: KeyframeConfig = KeyframeConfig(),
) -> SimRun:
    """Drive through ``waypoints`` (world frame) scanning every meter.

    ``local_frame`` maps world coordinates into the robot's map frame; by
    default it is the inverse of the first pose, as a SLAM front end would
    produce.
    """
    wp = np.asarray(waypoints, dtype=np.float64).reshape(-1, 3)
    if len(wp) < 2:
        raise ValueError("need at least two waypoints")
    for p in wp:
        if not world.contains(p):
            raise ValueError(f"waypoint {p.tolist()} is outside free space")
    if not world.free_space.contains(LineString(wp[:, :2])):
        raise ValueError("waypoint path leaves free space")

    pos, yaw, dist = _resample(wp)
    poses = [Transform(rot_z(y), p) for p, y in zip(pos, yaw)]
    if local_frame is None:
        local_frame = se3_inverse(poses[0])

    local_poses = [se3_compose(local_frame, p) for p in poses]
    scans = [scan(world, pose, config, i) for i, pose in enumerate(poses)]
    chunks = [se3_apply(lp, pts) for lp, pts in zip(local_poses, scans)]
    steps = keyframe_steps(dist, keyframes.distance)
    records = [keyframe_record(scans[k], local_poses[k], k, config, keyframes) for k in steps]
    cloud = np.concatenate(chunks, axis=0)

    local_traj = Trajectory(
        np.arange(len(poses)),
        se3_apply(local_frame, pos),
        np.array([lp.yaw for lp in local_poses]),
    )
    run = RobotRun(cloud, local_traj, records)
    return SimRun(run, poses, local_frame, scans, world.world_id, config, keyframes)


def ground_truth_transform(a: SimRun, b: SimRun) -> Transform:
    """Transform taking b's local map frame into a's."""
    if a.world_id != b.world_id:
        raise ValueError("runs come from different worlds")
    return se3_compose(a.frame_offset, se3_inverse(b.frame_offset))
