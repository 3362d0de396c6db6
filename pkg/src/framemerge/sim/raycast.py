"""Ray casting against a triangle soup using a uniform grid over the xy plane."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_EPS = 1e-12


@nb.njit(cache=True)
def _count_cells(tris, gx0, gy0, cell, nx, ny):
    counts = np.zeros(nx * ny, np.int64)
    for t in range(tris.shape[0]):
        xmin = min(tris[t, 0, 0], tris[t, 1, 0], tris[t, 2, 0])
        xmax = max(tris[t, 0, 0], tris[t, 1, 0], tris[t, 2, 0])
        ymin = min(tris[t, 0, 1], tris[t, 1, 1], tris[t, 2, 1])
        ymax = max(tris[t, 0, 1], tris[t, 1, 1], tris[t, 2, 1])
        ix0 = max(int(math.floor((xmin - gx0) / cell)), 0)
        ix1 = min(int(math.floor((xmax - gx0) / cell)), nx - 1)
        iy0 = max(int(math.floor((ymin - gy0) / cell)), 0)
        iy1 = min(int(math.floor((ymax - gy0) / cell)), ny - 1)
        for ix in range(ix0, ix1 + 1):
            for iy in range(iy0, iy1 + 1):
                counts[iy * nx + ix] += 1
    return counts


@nb.njit(cache=True)
def _fill_cells(tris, gx0, gy0, cell, nx, ny, start):
    fill = start[:-1].copy()
    ids = np.empty(start[-1], np.int64)
    for t in range(tris.shape[0]):
        xmin = min(tris[t, 0, 0], tris[t, 1, 0], tris[t, 2, 0])
        xmax = max(tris[t, 0, 0], tris[t, 1, 0], tris[t, 2, 0])
        ymin = min(tris[t, 0, 1], tris[t, 1, 1], tris[t, 2, 1])
        ymax = max(tris[t, 0, 1], tris[t, 1, 1], tris[t, 2, 1])
        ix0 = max(int(math.floor((xmin - gx0) / cell)), 0)
        ix1 = min(int(math.floor((xmax - gx0) / cell)), nx - 1)
        iy0 = max(int(math.floor((ymin - gy0) / cell)), 0)
        iy1 = min(int(math.floor((ymax - gy0) / cell)), ny - 1)
        for ix in range(ix0, ix1 + 1):
            for iy in range(iy0, iy1 + 1):
                c = iy * nx + ix
                ids[fill[c]] = t
                fill[c] += 1
    return ids


@nb.njit(cache=True)
def _hit_triangle(tris, t, ox, oy, oz, dx, dy, dz):
    # Moller-Trumbore
    ax, ay, az = tris[t, 0, 0], tris[t, 0, 1], tris[t, 0, 2]
    e1x, e1y, e1z = tris[t, 1, 0] - ax, tris[t, 1, 1] - ay, tris[t, 1, 2] - az
    e2x, e2y, e2z = tris[t, 2, 0] - ax, tris[t, 2, 1] - ay, tris[t, 2, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < _EPS:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = ox - ax, oy - ay, oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    tt = (e2x * qx + e2y * qy + e2z * qz) * inv
    if tt <= 1e-9:
        return np.inf
    return tt


@nb.njit(cache=True)
def _cast(tris, start, ids, gx0, gy0, cell, nx, ny, origin, dirs, max_range):
    n = dirs.shape[0]
    out = np.full(n, np.inf)
    ox, oy, oz = origin[0], origin[1], origin[2]
    ix0 = int(math.floor((ox - gx0) / cell))
    iy0 = int(math.floor((oy - gy0) / cell))
    if ix0 < 0 or iy0 < 0 or ix0 >= nx or iy0 >= ny:
        return out
    for r in range(n):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy = ix0, iy0
        if dx > 0:
            sx, tmx, tdx = 1, ((ix + 1) * cell + gx0 - ox) / dx, cell / dx
        elif dx < 0:
            sx, tmx, tdx = -1, (ix * cell + gx0 - ox) / dx, -cell / dx
        else:
            sx, tmx, tdx = 0, np.inf, np.inf
        if dy > 0:
            sy, tmy, tdy = 1, ((iy + 1) * cell + gy0 - oy) / dy, cell / dy
        elif dy < 0:
            sy, tmy, tdy = -1, (iy * cell + gy0 - oy) / dy, -cell / dy
        else:
            sy, tmy, tdy = 0, np.inf, np.inf
        best = np.inf
        while True:
            c = iy * nx + ix
            for k in range(start[c], start[c + 1]):
                tt = _hit_triangle(tris, ids[k], ox, oy, oz, dx, dy, dz)
                if tt < best:
                    best = tt
            t_exit = min(tmx, tmy)
            if best <= t_exit or t_exit > max_range:
                break
            if tmx < tmy:
                ix += sx
                tmx += tdx
            else:
                iy += sy
                tmy += tdy
            if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
                break
        if best <= max_range:
            out[r] = best
    return out


class TriangleGrid:
    """Bins triangles into square xy cells for fast first-hit queries."""

    def __init__(self, triangles: np.ndarray, cell: float = 1.0):
        tris = np.ascontiguousarray(triangles, dtype=np.float64)
        if tris.ndim != 3 or tris.shape[1:] != (3, 3):
            raise ValueError("triangles must have shape (T, 3, 3)")
        self.triangles = tris
        self.cell = float(cell)
        lo = tris[:, :, :2].reshape(-1, 2).min(axis=0) - cell
        hi = tris[:, :, :2].reshape(-1, 2).max(axis=0) + cell
        self.origin = lo
        self.nx = int(np.ceil((hi[0] - lo[0]) / cell))
        self.ny = int(np.ceil((hi[1] - lo[1]) / cell))
        counts = _count_cells(tris, lo[0], lo[1], self.cell, self.nx, self.ny)
        self.start = np.zeros(len(counts) + 1, np.int64)
        np.cumsum(counts, out=self.start[1:])
        self.ids = _fill_cells(tris, lo[0], lo[1], self.cell, self.nx, self.ny, self.start)

    def cast(self, origin, directions, max_range: float = np.inf) -> np.ndarray:
        """Distance to the first hit along each unit direction, ``inf`` on a miss."""
        return _cast(
            self.triangles,
            self.start,
            self.ids,
            self.origin[0],
            self.origin[1],
            self.cell,
            self.nx,
            self.ny,
            np.asarray(origin, dtype=np.float64),
            np.ascontiguousarray(directions, dtype=np.float64),
            float(max_range),
        )
