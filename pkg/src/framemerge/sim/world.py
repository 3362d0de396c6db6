"""Procedural tunnel worlds built from a corridor graph.

The free space is the union of flat-ended corridor strips plus a disk at
every node joining two or more corridors. Its outline is extruded into wall
panels that bulge by a seeded amount, while the floor (z = 0) and the
ceiling are constrained-Delaunay triangulations of the same outline, so
walls, floor and ceiling share their boundary vertices.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.geometry import LineString, Point, Polygon
from shapely.ops import orient, unary_union

from .raycast import TriangleGrid


@dataclass(frozen=True)
class Corridor:
    a: int
    b: int
    width: float
    height: float


@dataclass(frozen=True)
class WorldSpec:
    nodes: tuple
    edges: tuple
    roughness: float = 0.2
    seed: int = 0
    panel: float = 1.0

    def __post_init__(self):
        nodes = tuple(tuple(float(c) for c in n) + (0.0,) * (3 - len(n)) for n in self.nodes)
        edges = tuple(e if isinstance(e, Corridor) else Corridor(*e) for e in self.edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        if not edges:
            raise ValueError("world needs at least one corridor")
        for n in nodes:
            if n[2] != 0.0:
                raise ValueError("junction centres must lie on the floor plane z = 0")
        for e in edges:
            if not (0 <= e.a < len(nodes) and 0 <= e.b < len(nodes)) or e.a == e.b:
                raise ValueError(f"corridor {e} references invalid nodes")
            if not 3.0 <= e.width <= 10.0 or not 3.0 <= e.height <= 6.0:
                raise ValueError(f"corridor {e} outside width 3-10 m / height 3-6 m")
        if self.roughness < 0 or self.panel <= 0:
            raise ValueError("roughness must be >= 0 and panel > 0")

    @classmethod
    def from_dict(cls, d: dict) -> WorldSpec:
        return cls(
            nodes=tuple(tuple(n) for n in d["nodes"]),
            edges=tuple(Corridor(int(e[0]), int(e[1]), float(e[2]), float(e[3])) for e in d["edges"]),
            roughness=float(d.get("roughness", 0.2)),
            seed=int(d.get("seed", 0)),
            panel=float(d.get("panel", 1.0)),
        )

    def to_dict(self) -> dict:
        return {
            "nodes": [list(n) for n in self.nodes],
            "edges": [[e.a, e.b, e.width, e.height] for e in self.edges],
            "roughness": self.roughness,
            "seed": self.seed,
            "panel": self.panel,
        }


@dataclass
class World:
    spec: WorldSpec
    triangles: np.ndarray
    free_space: Polygon
    world_id: str
    grid: TriangleGrid = field(repr=False)

    def cast(self, origin, directions, max_range: float = np.inf) -> np.ndarray:
        return self.grid.cast(origin, directions, max_range)

    def ceiling_at(self, xy) -> np.ndarray:
        return _ceiling_height(self.spec, np.atleast_2d(np.asarray(xy, float))[:, :2])

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float).reshape(3)
        if not self.free_space.contains(Point(p[0], p[1])):
            return False
        return 0.0 < p[2] < float(self.ceiling_at(p[:2])[0])

    @property
    def vertex_count(self) -> int:
        return len(np.unique(self.triangles.reshape(-1, 3), axis=0))


def _check_connected(spec: WorldSpec) -> None:
    adj = {i: set() for i in range(len(spec.nodes))}
    for e in spec.edges:
        adj[e.a].add(e.b)
        adj[e.b].add(e.a)
    seen, stack = {0}, [0]
    while stack:
        for m in adj[stack.pop()] - seen:
            seen.add(m)
            stack.append(m)
    if len(seen) != len(spec.nodes):
        raise ValueError("corridor graph is disconnected")


def _ceiling_height(spec: WorldSpec, xy: np.ndarray) -> np.ndarray:
    """Height of the corridor whose centreline is nearest to each xy."""
    nodes = np.array(spec.nodes)[:, :2]
    best_d = np.full(len(xy), np.inf)
    best_h = np.zeros(len(xy))
    for e in spec.edges:
        a, b = nodes[e.a], nodes[e.b]
        ab = b - a
        s = np.clip(((xy - a) @ ab) / (ab @ ab), 0.0, 1.0)
        d = np.linalg.norm(xy - (a + s[:, None] * ab), axis=1)
        closer = d < best_d - 1e-12
        best_d = np.where(closer, d, best_d)
        best_h = np.where(closer, e.height, best_h)
    return best_h


def _free_space(spec: WorldSpec) -> Polygon:
    nodes = np.array(spec.nodes)[:, :2]
    pieces = []
    degree = np.zeros(len(nodes), int)
    radius = np.zeros(len(nodes))
    for e in spec.edges:
        line = LineString([nodes[e.a], nodes[e.b]])
        pieces.append(line.buffer(e.width / 2.0, cap_style="flat"))
        for n in (e.a, e.b):
            degree[n] += 1
            radius[n] = max(radius[n], e.width / 2.0)
    for n in np.flatnonzero(degree >= 2):
        pieces.append(Point(nodes[n]).buffer(radius[n], quad_segs=8))
    free = unary_union(pieces)
    if free.geom_type != "Polygon":
        raise ValueError("corridor free space is not a single polygon")
    free = shapely.segmentize(free.simplify(1e-6), spec.panel)
    return orient(free, sign=1.0)


def _smooth_circular(x: np.ndarray, width: float) -> np.ndarray:
    n = len(x)
    half = int(np.ceil(3 * width))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / width) ** 2)
    k /= k.sum()
    idx = (np.arange(n)[:, None] + np.arange(-half, half + 1)[None, :]) % n
    y = x[idx] @ k
    std = y.std()
    return y / std if std > 0 else y


def generate_world(spec: WorldSpec) -> World:
    _check_connected(spec)
    free = _free_space(spec)
    rng = np.random.default_rng(spec.seed)
    max_h = max(e.height for e in spec.edges)
    levels = max(2, int(np.ceil(max_h / spec.panel)))
    frac = np.linspace(0.0, 1.0, levels + 1)
    profile = np.sin(np.pi * frac)  # zero at floor and ceiling

    tris = []
    rings = [free.exterior, *free.interiors]
    for ring in rings:
        v = np.asarray(ring.coords)[:-1, :2]
        n = len(v)
        nxt = np.roll(v, -1, axis=0)
        prv = np.roll(v, 1, axis=0)
        seg = nxt - prv
        normal = np.stack([seg[:, 1], -seg[:, 0]], axis=1)  # right of travel = outward
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        h = _ceiling_height(spec, v)

        bulge = spec.roughness * np.clip(_smooth_circular(rng.standard_normal(n), 3.0), -2.5, 2.5)
        bumps = 0.5 * spec.roughness * rng.uniform(-1.0, 1.0, (n, levels + 1))
        bumps[:, 0] = bumps[:, -1] = 0.0
        offset = bulge[:, None] * profile[None, :] + bumps  # (n, levels+1)

        xy = v[:, None, :] + offset[:, :, None] * normal[:, None, :]
        z = h[:, None] * frac[None, :]
        grid = np.concatenate([xy, z[:, :, None]], axis=2)  # (n, L+1, 3)
        g1 = np.roll(grid, -1, axis=0)
        a, b = grid[:, :-1], g1[:, :-1]
        c, d = g1[:, 1:], grid[:, 1:]
        tris.append(np.stack([a, b, c], axis=2).reshape(-1, 3, 3))
        tris.append(np.stack([a, c, d], axis=2).reshape(-1, 3, 3))

    # Floor and ceiling share the outline vertices with the wall panels.
    cdt = shapely.constrained_delaunay_triangles(free)
    for poly in cdt.geoms:
        xy = np.asarray(poly.exterior.coords)[:3, :2]
        floor = np.column_stack([xy, np.zeros(3)])
        ceil = np.column_stack([xy, _ceiling_height(spec, xy)])
        tris.append(floor[None])
        tris.append(ceil[None])

    triangles = np.ascontiguousarray(np.concatenate(tris, axis=0))
    world_id = hashlib.sha256(triangles.tobytes()).hexdigest()[:16]
    return World(spec, triangles, free, world_id, TriangleGrid(triangles, cell=1.0))
