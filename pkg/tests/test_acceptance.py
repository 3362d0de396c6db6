"""Acceptance suite. Every test prints one PASS/FAIL line for its criterion.

The lines are repeated under "acceptance criteria" in the pytest terminal
summary. Run with ``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest
from shapely.geometry import Point

from conftest import SMALL_EDGES, SMALL_NODES, record_criterion
from framemerge import io
from framemerge.descriptors import DescriptorRecord, estimate_yaw, extract_descriptors
from framemerge.geometry import Trajectory, Transform, se3_apply, se3_from_yaw_translation, so3_exp, transform_errors
from framemerge.overlap import build_index, query_best_pair
from framemerge.pipeline import MergeError, merge_pair, merge_recursive
from framemerge.projection import spherical_project
from framemerge.registration import RegistrationParams, SphereRegion, gicp_register, prepare_cloud, sample_sphere
from framemerge.sim.lidar import ScanConfig, scan, simulate_run
from framemerge.sim.scenarios import load_scenario
from framemerge.sim.world import WorldSpec, generate_world

SEEDS = range(10)
HALF_BIN_DEG = 360.0 / 64 / 2


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec(SMALL_NODES, SMALL_EDGES, roughness=0.2, seed=3))


def free_poses(world, rng, n):
    """Random sensor positions at least 0.5 m clear of the walls."""
    inner = world.free_space.buffer(-0.5)
    x0, y0, x1, y1 = inner.bounds
    out = []
    while len(out) < n:
        p = (rng.uniform(x0, x1), rng.uniform(y0, y1))
        if inner.contains(Point(p)):
            out.append(np.array([p[0], p[1], rng.uniform(0.6, 2.0)]))
    return out


# -- end-to-end scenarios -----------------------------------------------------------


def test_fig3_analogue():
    sc = load_scenario("fig3")
    passes, lines = 0, []
    for seed in SEEDS:
        sim = sc.build(seed)
        a, b = sim.runs
        gt = sim.ground_truths()[0]
        t0 = time.perf_counter()
        try:
            _, rep = merge_pair(a.run, b.run, sc.radius, ground_truth=gt)
        except MergeError as exc:
            lines.append(f"seed {seed}: {exc}")
            continue
        wall = time.perf_counter() - t0
        ok = rep.t_e <= 0.2 and rep.r_e <= 3.5 and wall < 3.0
        passes += ok
        lines.append(f"seed {seed}: T_e {rep.t_e:.3f} m, R_e {rep.r_e:.3f} deg, {wall:.2f} s")
    lengths = [round(r.run.trajectory.length) for r in sim.runs]
    print("\n".join(lines))
    record_criterion(
        "Fig. 3 analogue",
        passes >= 9,
        f"{passes}/10 seeds with T_e <= 0.2 m, R_e <= 3.5 deg, time < 3 s (runs {lengths[0]} m / {lengths[1]} m)",
    )
    assert passes >= 9


def test_fig4_analogue():
    sc = load_scenario("fig4")
    assert sc.radius == 15.0
    passes, lines = 0, []
    for seed in SEEDS:
        sim = sc.build(seed)
        try:
            _, reps = merge_recursive([r.run for r in sim.runs], sc.radius, ground_truths=sim.ground_truths())
        except MergeError as exc:
            lines.append(f"seed {seed}: {exc}")
            continue
        ok = len(reps) == 3 and all(r.t_e <= 0.2 and r.r_e <= 1.5 for r in reps)
        passes += ok
        lines.append(f"seed {seed}: " + ", ".join(f"({r.t_e:.3f} m, {r.r_e:.3f} deg)" for r in reps))
    print("\n".join(lines))
    record_criterion("Fig. 4 analogue", passes >= 9, f"{passes}/10 seeds with all 3 folds T_e <= 0.2 m, R_e <= 1.5 deg")
    assert passes >= 9


# -- overlap query ------------------------------------------------------------------


def brute_force(own, incoming):
    """Exhaustive argmin of (distance, k_i, k_j) over every pair."""
    qa = np.array([r.q for r in own])
    qb = np.array([r.q for r in incoming])
    ka = np.array([r.timestep for r in own])
    kb = np.array([r.timestep for r in incoming])
    best = None
    for s in range(0, len(qa), 16):
        d = np.sqrt(np.sum((qa[s : s + 16, None, :] - qb[None, :, :]) ** 2, axis=2))
        i, j = np.nonzero(d == d.min())
        w = np.lexsort((kb[j], ka[s + i]))[0]
        cand = (d[i[w], j[w]], ka[s + i[w]], kb[j[w]])
        if best is None or cand < best:
            best = cand
    return best


def random_records(rng, n, pool=None):
    ks = rng.permutation(10 * n)[:n]
    if pool is None:
        q = rng.normal(size=(n, 64))
    else:
        q = pool[rng.integers(0, len(pool), n)]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return [DescriptorRecord(q[i], np.zeros(64), np.zeros(3), int(ks[i])) for i in range(n)]


def test_overlap_query_exactness():
    rng = np.random.default_rng(2024)
    failures, slowest, sizes = 0, 0.0, []
    for trial in range(200):
        if trial < 5:
            n, m = 5000, 5000
        else:
            n, m = (int(np.exp(rng.uniform(0, np.log(5000)))) for _ in range(2))
        # every fourth instance draws from a small pool so exact ties occur
        pool = rng.normal(size=(int(rng.integers(2, 20)), 64)) if trial % 4 == 3 else None
        own, inc = random_records(rng, n, pool), random_records(rng, m, pool)
        t0 = time.perf_counter()
        match = query_best_pair(build_index(own), inc)
        slowest = max(slowest, time.perf_counter() - t0)
        d, ki, kj = brute_force(own, inc)
        if (match.own_timestep, match.incoming_timestep) != (ki, kj) or abs(match.descriptor_distance - d) > 1e-12:
            failures += 1
        sizes.append(n * m)
    ok = failures == 0 and slowest < 1.0
    record_criterion(
        "Overlap-query exactness",
        ok,
        f"{200 - failures}/200 equal to brute force, slowest query {slowest:.3f} s, largest {max(sizes)} pairs",
    )
    assert ok


# -- descriptors --------------------------------------------------------------------


def test_yaw_regression(world):
    rng = np.random.default_rng(7)
    errors = []
    for i, p in enumerate(free_poses(world, rng, 100)):
        fov = float(rng.choice([20.0, 30.0]))
        yaw, delta = rng.uniform(-np.pi, np.pi, 2)
        # a second scan from the same spot, turned by delta, with fresh noise
        s1 = scan(world, se3_from_yaw_translation(yaw, p), ScanConfig(vertical_fov=fov, seed=2 * i))
        s2 = scan(world, se3_from_yaw_translation(yaw + delta, p), ScanConfig(vertical_fov=fov, seed=2 * i + 1))
        _, w1 = extract_descriptors(spherical_project(s1, 16, 256, fov, 50.0))
        _, w2 = extract_descriptors(spherical_project(s2, 16, 256, fov, 50.0))
        err = (estimate_yaw(w2, w1) - delta + np.pi) % (2 * np.pi) - np.pi
        errors.append(abs(np.degrees(err)))
    good = int(np.sum(np.array(errors) <= HALF_BIN_DEG))
    record_criterion(
        "Yaw regression", good >= 95, f"{good}/100 within {HALF_BIN_DEG} deg, median error {np.median(errors):.2f} deg"
    )
    assert good >= 95


def test_descriptor_invariance(world):
    rng = np.random.default_rng(8)
    cfg = ScanConfig(horizontal_step=360.0 / 256)
    worst_q, worst_w = 0.0, 0.0
    for i, p in enumerate(free_poses(world, rng, 50)):
        pts = scan(world, se3_from_yaw_translation(rng.uniform(-np.pi, np.pi), p), ScanConfig(**{**cfg.to_dict(), "seed": i}))
        q0, w0 = extract_descriptors(spherical_project(pts, 16, 256, 30.0, 50.0))
        for k in rng.integers(1, 256, 4):
            q, _ = extract_descriptors(spherical_project(se3_apply(se3_from_yaw_translation(k * 2 * np.pi / 256), pts), 16, 256, 30.0, 50.0))
            worst_q = max(worst_q, float(np.max(np.abs(q - q0))))
        for g in rng.integers(1, 64, 2):
            rot = se3_apply(se3_from_yaw_translation(4 * g * 2 * np.pi / 256), pts)
            _, w = extract_descriptors(spherical_project(rot, 16, 256, 30.0, 50.0))
            worst_w = max(worst_w, float(np.max(np.abs(w - np.roll(w0, g)))))
    ok = worst_q <= 1e-9 and worst_w <= 1e-9
    record_criterion(
        "Descriptor invariance",
        ok,
        f"50 scans, max |dq| {worst_q:.1e} over column rotations, max |w - shifted w| {worst_w:.1e} over 4-column rotations",
    )
    assert ok


# -- registration -------------------------------------------------------------------


def random_perturbation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    t = rng.normal(size=3)
    t *= rng.uniform(0, 0.5) / np.linalg.norm(t)
    return Transform(so3_exp(axis * np.radians(rng.uniform(0, 10.0))), t)


def test_gicp_recovery(noiseless_run):
    rng = np.random.default_rng(9)
    params = RegistrationParams()
    traj = noiseless_run.run.trajectory
    recovered, monotone = 0, 0
    for step in (10, 25, 35, 45, 55):
        c = traj.position_at(step)
        src = prepare_cloud(sample_sphere(noiseless_run.run.map, SphereRegion(c, 10.0)) - c, params)
        for _ in range(20):
            t = random_perturbation(rng)
            res = gicp_register(src, src.transformed(t), Transform.identity(), params)
            err = transform_errors(t, res.transform)
            recovered += err.translation_error <= 0.01 and err.rotation_error <= 0.1
            monotone += all(after <= before for before, after in res.step_costs)
    ok = recovered >= 98 and monotone == 100
    record_criterion("GICP recovery", ok, f"{recovered}/100 within 0.01 m / 0.1 deg, {monotone}/100 with non-increasing cost")
    assert ok


# -- negative control ---------------------------------------------------------------


def test_negative_control():
    staged, lines = 0, []
    allowed = ("no discriminative overlap", "initial guess outside capture range")
    for s in SEEDS:
        wa = generate_world(WorldSpec(SMALL_NODES, SMALL_EDGES, roughness=0.2, seed=100 + s))
        wb = generate_world(WorldSpec([(0, 0), (50, 0), (50, -30)], [(0, 1, 8, 5.5), (1, 2, 3.5, 3)], roughness=0.4, seed=200 + s))
        a = simulate_run(wa, [(5, 0, 1.2), (40, 0, 1.2), (40, 25, 1.2)], ScanConfig(seed=s))
        b = simulate_run(wb, [(3, 0, 0.8), (50, 0, 0.8), (50, -28, 0.8)], ScanConfig(vertical_fov=20.0, seed=50 + s))
        try:
            merge_pair(a.run, b.run)
            lines.append(f"seed {s}: merged silently")
        except MergeError as exc:
            staged += exc.message.startswith(allowed)
            lines.append(f"seed {s}: [{exc.stage}] {exc.message}")
    print("\n".join(lines))
    record_criterion("Negative control", staged == 10, f"{staged}/10 disjoint-world pairs refused with a staged error")
    assert staged == 10


# -- formats ------------------------------------------------------------------------


def test_format_round_trips(tmp_path):
    rng = np.random.default_rng(10)
    cloud = rng.normal(scale=30.0, size=(5000, 3))
    f32 = cloud.astype(np.float32).astype(np.float64)
    io.write_pcd(tmp_path / "b.pcd", cloud)
    io.write_pcd(tmp_path / "a.pcd", cloud, binary=False)
    pcd_ok = np.array_equal(io.read_pcd(tmp_path / "b.pcd"), f32) and np.array_equal(io.read_pcd(tmp_path / "a.pcd"), f32)

    traj = Trajectory(np.arange(300), rng.normal(scale=100.0, size=(300, 3)), rng.uniform(-np.pi, np.pi, 300))
    io.write_trajectory(tmp_path / "t.csv", traj)
    back = io.read_trajectory(tmp_path / "t.csv")
    csv_err = max(np.max(np.abs(back.positions - traj.positions)), np.max(np.abs(back.yaws - traj.yaws)))
    csv_ok = np.array_equal(back.timesteps, traj.timesteps) and csv_err <= 1e-9

    recs = []
    for k in range(50):
        q = rng.normal(size=64)
        recs.append(DescriptorRecord(q / np.linalg.norm(q), rng.uniform(0, 50, 64), rng.normal(size=3), k))
    io.write_descriptors(tmp_path / "d.frds", recs)
    got = io.read_descriptors(tmp_path / "d.frds")
    frds_ok = all(
        g.timestep == r.timestep
        and np.array_equal(g.position, r.position)
        and np.array_equal(g.q, r.q.astype(np.float32).astype(np.float64))
        and np.array_equal(g.w, r.w.astype(np.float32).astype(np.float64))
        for g, r in zip(got, recs)
    ) and len(got) == len(recs)

    ok = pcd_ok and csv_ok and frds_ok
    record_criterion(
        "Format round-trips",
        ok,
        f"PCD binary+ascii exact to f32: {pcd_ok}, CSV max error {csv_err:.1e}, FRDS exact to f32: {frds_ok} "
        "(the tagged examples run as unit tests across the suite)",
    )
    assert ok
