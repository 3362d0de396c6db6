"""Generalized-ICP refinement on spherical submaps.

Plane-to-plane GICP: every point carries a covariance rebuilt with the
eigenvalues ``(1, 1, eps)`` of its local neighbourhood, and each iteration
takes one Gauss-Newton step on SE(3) for the Mahalanobis cost

    sum_i d_i^T (C_target_i + R C_source_i R^T)^-1 d_i,    d_i = t_i - (R s_i + p)

with a left-multiplied 6-d perturbation and a step-halving line search.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Transform, as_points, se3_apply, se3_compose, se3_exp

_DEGENERATE_TOL = 1e-9
_MAX_HALVINGS = 8
_STALL_LIMIT = 5


class CaptureRangeError(RuntimeError):
    pass


@dataclass(frozen=True)
class SphereRegion:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class RegistrationParams:
    max_correspondence_distance: float = 1.0
    max_iterations: int = 64
    translation_epsilon: float = 1e-4
    rotation_epsilon: float = 1e-4
    covariance_k: int = 20
    plane_regularization: float = 1e-3
    voxel_leaf: float = 0.25
    # Post-convergence sanity check: fraction of source points that must end
    # within ``inlier_distance`` of the matched target plane.
    min_fitness: float = 0.6
    inlier_distance: float = 0.1

    def __post_init__(self):
        positive = (
            self.max_correspondence_distance,
            self.max_iterations,
            self.translation_epsilon,
            self.rotation_epsilon,
            self.covariance_k,
            self.plane_regularization,
            self.inlier_distance,
        )
        if any(not v > 0 for v in positive) or self.voxel_leaf < 0:
            raise ValueError("registration parameters must be positive (voxel_leaf >= 0)")
        if not 0 <= self.min_fitness <= 1:
            raise ValueError("min_fitness must lie in [0, 1]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def with_overrides(self, **kw) -> RegistrationParams:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


@dataclass
class CovariantCloud:
    points: np.ndarray
    covariances: np.ndarray
    normals: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, t: Transform) -> CovariantCloud:
        r = t.rotation
        return CovariantCloud(
            se3_apply(t, self.points),
            r @ self.covariances @ r.T,
            self.normals @ r.T,
            self.degenerate.copy(),
        )


@dataclass
class RegistrationResult:
    transform: Transform
    iterations: int
    converged: bool
    final_cost: float
    correspondence_count: int
    fitness: float = 0.0
    # (cost before, cost after) of every accepted step, same correspondences.
    step_costs: list = field(default_factory=list)


def sample_sphere(cloud, region: SphereRegion) -> np.ndarray:
    """Points within the closed ball ``|m - c| <= r``, original order."""
    pts = as_points(cloud)
    d2 = np.sum((pts - region.center) ** 2, axis=1)
    return pts[d2 <= region.radius**2]


def voxel_downsample(cloud, leaf: float) -> np.ndarray:
    """Replace the points of every occupied voxel by their centroid."""
    pts = as_points(cloud)
    if leaf <= 0 or len(pts) == 0:
        return pts
    keys = np.floor(pts / leaf).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    out = np.zeros((len(counts), 3))
    np.add.at(out, inverse, pts)
    return out / counts[:, None]


def estimate_covariances(cloud, k: int = 20, regularization: float = 1e-3) -> CovariantCloud:
    pts = as_points(cloud)
    if k < 3:
        raise ValueError("covariance_k must be at least 3")
    if len(pts) < k + 1:
        raise ValueError(f"need at least {k + 1} points for covariance estimation, got {len(pts)}")
    _, nbr = cKDTree(pts).query(pts, k=k)
    neigh = pts[nbr]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)  # ascending
    degenerate = evals[:, 1] <= _DEGENERATE_TOL * np.maximum(evals[:, 2], 1e-300)
    reg = np.array([regularization, 1.0, 1.0])
    rebuilt = np.einsum("nij,j,nkj->nik", evecs, reg, evecs)
    return CovariantCloud(pts, rebuilt, evecs[:, :, 0].copy(), degenerate)


def prepare_cloud(cloud, params: RegistrationParams) -> CovariantCloud:
    return estimate_covariances(
        voxel_downsample(cloud, params.voxel_leaf),
        params.covariance_k,
        params.plane_regularization,
    )


def _cost_terms(src_pts, src_cov, tgt_pts, tgt_cov, t: Transform):
    r = t.rotation
    q = src_pts @ r.T + t.translation
    d = tgt_pts - q
    info = np.linalg.inv(tgt_cov + r @ src_cov @ r.T)
    return q, d, info


def _cost(src_pts, src_cov, tgt_pts, tgt_cov, t: Transform) -> float:
    _, d, info = _cost_terms(src_pts, src_cov, tgt_pts, tgt_cov, t)
    return float(np.einsum("ni,nij,nj->", d, info, d))


def gicp_register(
    source: CovariantCloud,
    target: CovariantCloud,
    initial: Transform,
    params: RegistrationParams = RegistrationParams(),
) -> RegistrationResult:
    """Refine ``initial`` (source frame -> target frame) by plane-to-plane GICP."""
    src_ok = ~source.degenerate
    tgt_ok = np.flatnonzero(~target.degenerate)
    if len(tgt_ok) == 0 or not np.any(src_ok):
        raise CaptureRangeError("initial guess outside capture range")
    s_pts, s_cov = source.points[src_ok], source.covariances[src_ok]
    t_pts, t_cov = target.points[tgt_ok], target.covariances[tgt_ok]
    t_nrm = target.normals[tgt_ok]
    tree = cKDTree(t_pts)
    max_d = params.max_correspondence_distance

    def associate(t: Transform):
        q = s_pts @ t.rotation.T + t.translation
        dist, idx = tree.query(q, k=1, distance_upper_bound=max_d)
        ok = np.isfinite(dist)
        return np.flatnonzero(ok), idx[ok]

    est = initial
    src_idx, tgt_idx = associate(est)
    if len(src_idx) == 0:
        raise CaptureRangeError("initial guess outside capture range")

    best = (np.inf, est, len(src_idx))
    stall = 0
    prev_cost = np.inf
    converged = False
    step_costs = []
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        sp, sc = s_pts[src_idx], s_cov[src_idx]
        tp, tc = t_pts[tgt_idx], t_cov[tgt_idx]
        q, d, info = _cost_terms(sp, sc, tp, tc, est)
        cost = float(np.einsum("ni,nij,nj->", d, info, d))
        mean_cost = cost / len(q)
        if mean_cost < best[0]:
            best = (mean_cost, est, len(src_idx))
        if mean_cost >= prev_cost:
            stall += 1
            if stall >= _STALL_LIMIT:
                break
        else:
            stall = 0
        prev_cost = mean_cost

        # d(xi) = d + [q]x w - v  ->  J = [skew(q), -I]
        jac = np.zeros((len(q), 3, 6))
        jac[:, 0, 1], jac[:, 0, 2] = -q[:, 2], q[:, 1]
        jac[:, 1, 0], jac[:, 1, 2] = q[:, 2], -q[:, 0]
        jac[:, 2, 0], jac[:, 2, 1] = -q[:, 1], q[:, 0]
        jac[:, :, 3:] = -np.eye(3)
        jt_info = np.einsum("nki,nkj->nij", jac, info)
        hess = np.einsum("nij,njk->ik", jt_info, jac)
        grad = np.einsum("nij,nj->i", jt_info, d)
        try:
            xi = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            xi = -np.linalg.lstsq(hess, grad, rcond=None)[0]

        accepted = None
        scale = 1.0
        for _ in range(_MAX_HALVINGS + 1):
            cand = se3_compose(se3_exp(scale * xi), est)
            new_cost = _cost(sp, sc, tp, tc, cand)
            if new_cost <= cost:
                accepted = cand
                break
            scale *= 0.5

        if accepted is None:
            step_t = step_r = 0.0
        else:
            step_costs.append((cost, new_cost))
            step_r = float(np.linalg.norm(scale * xi[:3]))
            step_t = float(np.linalg.norm(accepted.translation - est.translation))
            est = accepted
        src_idx, tgt_idx = associate(est)
        if len(src_idx) == 0:
            break
        if step_t < params.translation_epsilon and step_r < params.rotation_epsilon:
            converged = True
            break

    if converged and len(src_idx):
        final_cost = _cost(s_pts[src_idx], s_cov[src_idx], t_pts[tgt_idx], t_cov[tgt_idx], est)
        count = len(src_idx)
    else:
        _, est, count = best
        src_idx, tgt_idx = associate(est)
        final_cost = _cost(s_pts[src_idx], s_cov[src_idx], t_pts[tgt_idx], t_cov[tgt_idx], est) if len(src_idx) else 0.0

    fitness = 0.0
    if len(src_idx):
        q = s_pts[src_idx] @ est.rotation.T + est.translation
        plane = np.abs(np.einsum("ni,ni->n", t_pts[tgt_idx] - q, t_nrm[tgt_idx]))
        fitness = float(np.count_nonzero(plane <= params.inlier_distance) / len(s_pts))

    return RegistrationResult(
        transform=est,
        iterations=iterations,
        converged=converged,
        final_cost=float(final_cost),
        correspondence_count=int(count),
        fitness=fitness,
        step_costs=step_costs,
    )


__all__ = [
    "CaptureRangeError",
    "CovariantCloud",
    "RegistrationParams",
    "RegistrationResult",
    "SphereRegion",
    "estimate_covariances",
    "gicp_register",
    "prepare_cloud",
    "sample_sphere",
    "voxel_downsample",
]
