"""Egocentric overlap estimation over query descriptors.

The robot indexes its own query vectors, queries with the incoming set and
keeps the single closest pair. That pair's positions and the yaw regressed
from the orientation vectors give the initial guess for registration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .descriptors import DESCRIPTOR_DIM, DescriptorRecord
from .geometry import Transform, se3_compose, se3_from_yaw_translation

# Rows of incoming descriptors screened per dense block.
_BLOCK = 1024


class NoOverlapError(RuntimeError):
    pass


@dataclass(frozen=True)
class OverlapMatch:
    own_timestep: int
    incoming_timestep: int
    own_position: np.ndarray
    incoming_position: np.ndarray
    descriptor_distance: float

    def to_dict(self) -> dict:
        return {
            "own_timestep": self.own_timestep,
            "incoming_timestep": self.incoming_timestep,
            "own_position": [float(v) for v in self.own_position],
            "incoming_position": [float(v) for v in self.incoming_position],
            "descriptor_distance": self.descriptor_distance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> OverlapMatch:
        return cls(
            int(d["own_timestep"]),
            int(d["incoming_timestep"]),
            np.asarray(d["own_position"], float),
            np.asarray(d["incoming_position"], float),
            float(d["descriptor_distance"]),
        )


def _stack_q(records) -> np.ndarray:
    q = np.array([r.q for r in records], dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != DESCRIPTOR_DIM:
        raise ValueError("query descriptors must have 64 entries")
    return q


def _pair_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


class DescriptorIndex:
    """Exact Euclidean nearest-neighbour index over the own query vectors."""

    def __init__(self, records):
        records = list(records)
        if not records:
            raise ValueError("cannot build a descriptor index from zero records")
        self._records = tuple(records)
        self._q = _stack_q(records)
        self._q.flags.writeable = False
        self._sq = np.einsum("ij,ij->i", self._q, self._q)
        self._timesteps = np.array([r.timestep for r in records], dtype=np.int64)
        self._tree = cKDTree(self._q)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[DescriptorRecord, ...]:
        return self._records

    def nearest(self, q) -> tuple[DescriptorRecord, float]:
        d, i = self._tree.query(np.asarray(q, dtype=np.float64), k=1)
        return self._records[int(i)], float(d)

    def top_k(self, incoming, k: int = 5) -> list[tuple[int, int, float]]:
        """Diagnostic listing of the ``k`` closest (own, incoming, distance) triples."""
        incoming = list(incoming)
        kk = min(k, len(self))
        d, i = self._tree.query(_stack_q(incoming), k=kk)
        d = np.asarray(d).reshape(len(incoming), kk)
        i = np.asarray(i).reshape(len(incoming), kk)
        triples = [
            (self._records[i[a, b]].timestep, incoming[a].timestep, float(d[a, b]))
            for a in range(len(incoming))
            for b in range(kk)
        ]
        triples.sort(key=lambda t: (t[2], t[0], t[1]))
        return triples[:k]

    def best_pair(self, incoming) -> tuple[int, int, float]:
        """Global argmin over all (own, incoming) pairs; returns list indices.

        Identical vectors are collapsed first, each represented by its
        smallest timestep, since they tie on every distance. Squared
        distances are then screened densely with the expansion
        ``|a|^2 + |b|^2 - 2 a.b``; every pair that could be the minimum given
        the round-off bound is recomputed from the coordinate differences, so
        the winner matches an exhaustive scan exactly. Ties go to the smaller
        own timestep, then the smaller incoming one.
        """
        qin = _stack_q(incoming)
        in_steps = np.array([r.timestep for r in incoming], dtype=np.int64)
        ua, ia = _collapse(self._q, self._timesteps)
        ub, ib = _collapse(qin, in_steps)
        sq_a = np.einsum("ij,ij->i", ua, ua)
        sq_b = np.einsum("ij,ij->i", ub, ub)
        slack = 1e-12 * (1.0 + sq_a.max() + sq_b.max())

        rows_min = np.empty(len(ub))
        for s in range(0, len(ub), _BLOCK):
            d2 = sq_b[s : s + _BLOCK, None] + sq_a[None, :] - 2.0 * (ub[s : s + _BLOCK] @ ua.T)
            rows_min[s : s + _BLOCK] = d2.min(axis=1)
        # The exact minimum squared distance is at most this.
        bound = rows_min.min() + 2 * slack

        rows = np.flatnonzero(rows_min <= bound)
        pa, pb = [], []
        for s in range(0, len(rows), _BLOCK):
            r = rows[s : s + _BLOCK]
            d2 = sq_b[r, None] + sq_a[None, :] - 2.0 * (ub[r] @ ua.T)
            jj, ii = np.nonzero(d2 <= bound + 2 * slack)
            pa.append(ii)
            pb.append(r[jj])
        pa, pb = np.concatenate(pa), np.concatenate(pb)
        dist = _pair_distance(ua[pa], ub[pb])
        i, j = ia[pa], ib[pb]
        w = np.lexsort((in_steps[j], self._timesteps[i], dist))[0]
        return int(i[w]), int(j[w]), float(dist[w])


def _collapse(q: np.ndarray, steps: np.ndarray):
    """Unique rows of ``q`` and, for each, the index of its smallest-timestep copy."""
    order = np.lexsort((np.arange(len(q)), steps))
    uniq, first = np.unique(q[order], axis=0, return_index=True)
    return uniq, order[first]


def build_index(records) -> DescriptorIndex:
    return DescriptorIndex(records)


def query_best_pair(index: DescriptorIndex, incoming) -> OverlapMatch:
    incoming = list(incoming)
    if not incoming:
        raise ValueError("incoming record set is empty")
    own_zero = not np.any(index._q)
    in_zero = not np.any(_stack_q(incoming))
    if own_zero and in_zero:
        raise NoOverlapError("no discriminative overlap")
    i, j, d = index.best_pair(incoming)
    own, inc = index.records[i], incoming[j]
    return OverlapMatch(own.timestep, inc.timestep, own.position, inc.position, d)


def initial_transform(match: OverlapMatch, yaw: float, raw: bool = False) -> Transform:
    """Initial guess mapping the incoming map frame into the own map frame.

    By default the incoming map is rotated by ``yaw`` about the matched
    incoming position and then moved onto the matched own position, so the
    two keyframe positions coincide exactly. ``raw=True`` instead rotates
    about the origin and translates by ``p_own - p_incoming``; both agree
    when ``yaw == 0``.
    """
    p1 = np.asarray(match.own_position, float)
    p2 = np.asarray(match.incoming_position, float)
    if raw:
        return se3_from_yaw_translation(yaw, p1 - p2)
    rot = se3_from_yaw_translation(yaw, (0.0, 0.0, 0.0))
    t = se3_compose(se3_from_yaw_translation(0.0, p1), se3_compose(rot, se3_from_yaw_translation(0.0, -p2)))
    return t
