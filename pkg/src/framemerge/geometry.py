"""Rigid transforms, point clouds, trajectories and alignment error metrics.

Point clouds are plain ``(N, 3)`` float64 arrays in meters. Rotations are kept
as 3x3 matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
_DRIFT_TOL = 1e-12


def as_points(points) -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 point array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def _check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> None:
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.linalg.norm(r.T @ r - np.eye(3)) > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation is not orthonormal with determinant +1")


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class Transform:
    """Element of SE(3): ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Transform:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Transform:
        m = np.asarray(m, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        """Heading of the rotated x axis about +z, in radians."""
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def to_list(self) -> list[float]:
        """Row-major 16-element list, the JSON wire format."""
        return [float(v) for v in self.matrix.reshape(-1)]

    def __matmul__(self, other: Transform) -> Transform:
        return se3_compose(self, other)


def se3_compose(a: Transform, b: Transform) -> Transform:
    """Return ``a * b``: apply ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    if np.linalg.norm(r.T @ r - np.eye(3)) > _DRIFT_TOL:
        r = orthonormalize(r)
    return Transform(r, a.rotation @ b.translation + a.translation)


def se3_inverse(t: Transform) -> Transform:
    rt = t.rotation.T
    return Transform(rt, -rt @ t.translation)


def se3_apply(t: Transform, cloud) -> np.ndarray:
    pts = as_points(cloud)
    return pts @ t.rotation.T + t.translation


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def se3_from_yaw_translation(yaw: float, t=(0.0, 0.0, 0.0)) -> Transform:
    if not np.isfinite(yaw):
        raise ValueError("yaw must be finite")
    return Transform(rot_z(yaw), t)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return (
        np.eye(3)
        + np.sin(theta) / theta * k
        + (1.0 - np.cos(theta)) / theta**2 * k @ k
    )


def se3_exp(xi) -> Transform:
    """Exponential map of a twist ``(omega, v)``."""
    xi = np.asarray(xi, dtype=np.float64)
    omega, v = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-8:
        jac = np.eye(3) + 0.5 * k + k @ k / 6.0
    else:
        jac = (
            np.eye(3)
            + (1.0 - np.cos(theta)) / theta**2 * k
            + (theta - np.sin(theta)) / theta**3 * k @ k
        )
    return Transform(orthonormalize(so3_exp(omega)), jac @ v)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians in [0, pi]."""
    c = (np.trace(r) - 1.0) / 2.0
    # arccos is ill-conditioned near 0 and pi; atan2 on the skew part is not.
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


# -- metrics ---------------------------------------------------------------


@dataclass(frozen=True)
class ErrorPair:
    translation_error: float
    rotation_error: float
    frobenius_residual: float = 0.0

    def __post_init__(self):
        if self.translation_error < 0 or not 0 <= self.rotation_error <= 180:
            raise ValueError("error pair out of range")


def translation_error(t_gt, t) -> float:
    """Euclidean distance between two translations, meters."""
    return float(np.linalg.norm(np.asarray(t_gt, float) - np.asarray(t, float)))


def rotation_error(r_gt, r) -> float:
    """Geodesic angle between two rotations, degrees in [0, 180]."""
    r_gt = np.asarray(r_gt, float)
    r = np.asarray(r, float)
    _check_rotation(r_gt)
    _check_rotation(r)
    return float(np.degrees(rotation_angle(r_gt @ r.T)))


def rotation_residual(r_gt, r) -> float:
    """Frobenius norm of ``R_gt R^-1 - I``, unitless."""
    r_gt = np.asarray(r_gt, float)
    r = np.asarray(r, float)
    _check_rotation(r_gt)
    _check_rotation(r)
    return float(np.linalg.norm(r_gt @ r.T - np.eye(3)))


def transform_errors(gt: Transform, est: Transform) -> ErrorPair:
    return ErrorPair(
        translation_error(gt.translation, est.translation),
        rotation_error(gt.rotation, est.rotation),
        rotation_residual(gt.rotation, est.rotation),
    )


# -- trajectories ------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Timestamped robot positions and headings in a local map frame."""

    timesteps: np.ndarray
    positions: np.ndarray
    yaws: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.timesteps, dtype=np.int64).reshape(-1)
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        y = np.asarray(self.yaws, dtype=np.float64).reshape(-1)
        if not (len(k) == len(p) == len(y)):
            raise ValueError("trajectory arrays differ in length")
        if len(k) > 1 and np.any(np.diff(k) <= 0):
            raise ValueError("trajectory timesteps must be strictly increasing")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y))):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "timesteps", k)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "yaws", y)

    def __len__(self) -> int:
        return len(self.timesteps)

    @property
    def length(self) -> float:
        """Traveled distance in meters."""
        if len(self) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    def position_at(self, k: int) -> np.ndarray:
        idx = np.searchsorted(self.timesteps, k)
        if idx >= len(self) or self.timesteps[idx] != k:
            raise KeyError(f"timestep {k} not in trajectory")
        return self.positions[idx]

    def transformed(self, t: Transform, timestep_offset: int = 0) -> Trajectory:
        return Trajectory(
            self.timesteps + timestep_offset,
            se3_apply(t, self.positions),
            np.angle(np.exp(1j * (self.yaws + t.yaw))),
        )
