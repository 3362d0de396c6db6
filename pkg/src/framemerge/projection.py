"""Spherical projection of a LiDAR scan into a 360 degree range image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_points

DEFAULT_ROWS = 16
DEFAULT_COLS = 256
# Slack for elevations that land on the fov edge up to rounding.
_FOV_SLACK = 1e-9


@dataclass(frozen=True)
class DepthImage:
    """Range grid, row 0 is the highest elevation. No-return cells are 0.0."""

    ranges: np.ndarray
    vertical_fov: float
    max_range: float

    @property
    def rows(self) -> int:
        return self.ranges.shape[0]

    @property
    def cols(self) -> int:
        return self.ranges.shape[1]

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=np.float64)
        if r.ndim != 2:
            raise ValueError("depth image must be 2-D")
        if np.any(r < 0) or np.any(r > self.max_range):
            raise ValueError("depth image ranges outside [0, max_range]")
        r.flags.writeable = False
        object.__setattr__(self, "ranges", r)


def spherical_project(
    scan,
    h: int = DEFAULT_ROWS,
    w: int = DEFAULT_COLS,
    vfov: float = 30.0,
    max_range: float = 50.0,
) -> DepthImage:
    """Bin a scan (sensor at the origin) into an ``h x w`` range image.

    Azimuth ``atan2(y, x)`` in ``[0, 2pi)`` maps to columns, elevation in
    ``[-vfov/2, vfov/2]`` (degrees) maps linearly to rows. Each cell keeps
    the minimum range among the points falling into it; points outside the
    vertical field of view or beyond ``max_range`` are dropped.
    """
    if h < 2 or w < 4 or vfov <= 0 or max_range <= 0:
        raise ValueError("invalid projection parameters")
    pts = as_points(scan)
    img = np.zeros((h, w))
    if len(pts) == 0:
        return DepthImage(img, vfov, max_range)

    rng = np.linalg.norm(pts, axis=1)
    keep = (rng > 0) & (rng <= max_range)
    pts, rng = pts[keep], rng[keep]

    half = np.radians(vfov) / 2.0
    elev = np.arcsin(np.clip(pts[:, 2] / rng, -1.0, 1.0))
    inside = np.abs(elev) <= half + _FOV_SLACK
    pts, rng, elev = pts[inside], rng[inside], elev[inside]

    az = np.arctan2(pts[:, 1], pts[:, 0])
    az = np.where(az < 0, az + 2 * np.pi, az)
    col = np.floor(az / (2 * np.pi) * w).astype(np.int64)
    col = np.clip(col, 0, w - 1)  # az == 2pi after rounding
    row = np.floor((half - elev) / (2 * half) * h).astype(np.int64)
    row = np.clip(row, 0, h - 1)

    flat = np.full(h * w, np.inf)
    np.minimum.at(flat, row * w + col, rng)
    flat[np.isinf(flat)] = 0.0
    return DepthImage(flat.reshape(h, w), vfov, max_range)


def write_pgm(image: DepthImage, path) -> None:
    """Dump ranges as a 16-bit binary PGM in millimeters."""
    mm = np.clip(np.round(image.ranges * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{image.cols} {image.rows}\n65535\n".encode("ascii"))
        f.write(mm.tobytes())
