"""Spectral place and orientation descriptors for range images.

``q`` collects the magnitudes of the low azimuthal harmonics of every ring,
which do not change when the scan is rotated about z. ``w`` is the azimuthal
range profile, which shifts circularly under the same rotation and is used
to regress the heading difference between two scans.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projection import DepthImage

DESCRIPTOR_DIM = 64
IMAGE_SHAPE = (16, 256)
HARMONICS = (1, 2, 3, 4)
GROUP = IMAGE_SHAPE[1] // DESCRIPTOR_DIM


class DegenerateDescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class DescriptorRecord:
    """Query vector, orientation vector and robot position of one keyframe."""

    q: np.ndarray
    w: np.ndarray
    position: np.ndarray
    timestep: int

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if q.shape != (DESCRIPTOR_DIM,) or w.shape != (DESCRIPTOR_DIM,):
            raise ValueError("descriptors must have 64 entries")
        if not np.all(np.isfinite(p)):
            raise ValueError("record position must be finite")
        if self.timestep < 0:
            raise ValueError("timestep must be non-negative")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "timestep", int(self.timestep))


def extract_descriptors(image: DepthImage) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(q, w)`` for a 16 x 256 depth image."""
    ranges = image.ranges
    if ranges.shape != IMAGE_SHAPE:
        raise ValueError(f"descriptor extraction needs a {IMAGE_SHAPE} image, got {ranges.shape}")

    w = ranges.reshape(IMAGE_SHAPE[0], DESCRIPTOR_DIM, GROUP).mean(axis=(0, 2))

    spectrum = np.abs(np.fft.rfft(ranges, axis=1))[:, list(HARMONICS)]
    q = spectrum.reshape(-1)
    norm = np.linalg.norm(q)
    # DC-free rows of a constant image leave ~1e-13 of FFT round-off.
    if norm <= 1e-9 * max(1.0, float(np.abs(ranges).sum())):
        q = np.zeros(DESCRIPTOR_DIM)
    else:
        q = q / norm
    return q, w


def estimate_yaw(w1, w2) -> float:
    """Heading offset in radians, in ``(-pi, pi]``, that best aligns ``w2`` to ``w1``.

    Picks the circular shift ``s`` maximising ``sum_i w1[i] * w2[(i + s) % 64]``.
    """
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape != (DESCRIPTOR_DIM,) or w2.shape != (DESCRIPTOR_DIM,):
        raise ValueError("orientation descriptors must have 64 entries")
    if not np.any(w1) or not np.any(w2):
        raise DegenerateDescriptorError("degenerate orientation descriptor")

    n = DESCRIPTOR_DIM
    idx = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
    corr = w2[idx] @ w1
    shifts = np.arange(n)
    angles = shifts * (2 * np.pi / n)
    angles = np.where(angles > np.pi, angles - 2 * np.pi, angles)

    peak = corr.max()
    tied = np.flatnonzero(corr >= peak - 1e-12 * max(1.0, abs(peak)))
    best = tied[np.argmin(np.abs(angles[tied]))]
    return float(angles[best])


def shift_orientation(w, yaw: float) -> np.ndarray:
    """Rotate an orientation descriptor by ``yaw`` radians (fractional shift).

    Linear interpolation between neighbouring groups keeps values non-negative.
    """
    w = np.asarray(w, dtype=np.float64)
    s = yaw / (2 * np.pi / DESCRIPTOR_DIM)
    i = np.arange(DESCRIPTOR_DIM)
    src = i - s
    lo = np.floor(src)
    frac = src - lo
    lo = lo.astype(np.int64) % DESCRIPTOR_DIM
    return (1 - frac) * w[lo] + frac * w[(lo + 1) % DESCRIPTOR_DIM]
