"""``framemerge`` command line.

Exit status: 0 on success, 1 for unreadable or malformed inputs, 2 when the
merge pipeline fails (the failing stage is printed on stderr).
"""

from __future__ import annotations

import os

# Thread caps have to be in place before numpy and numba load their pools.
if os.environ.get("FRAME_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["FRAME_THREADS"])

import argparse  # noqa: E402
import csv  # noqa: E402
import io as _io  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import io  # noqa: E402
from .descriptors import DescriptorRecord, extract_descriptors  # noqa: E402
from .geometry import Transform, se3_apply, se3_compose, se3_inverse, transform_errors  # noqa: E402
from .pipeline import MergeError, MergeReport, RobotRun, merge_pair, merge_recursive  # noqa: E402
from .projection import spherical_project, write_pgm  # noqa: E402
from .registration import RegistrationParams, voxel_downsample  # noqa: E402

DEFAULT_RADIUS = 10.0
OVERLAP_VOXEL = 0.5
EVAL_COLUMNS = ("merge", "overlap_percent", "t_e", "r_e", "time_s")


class CliError(Exception):
    """Bad input: reported with exit status 1."""


def _load_run(map_path, traj_path, desc_path) -> RobotRun:
    for p in (map_path, traj_path, desc_path):
        if not Path(p).is_file():
            raise CliError(f"{p}: no such file")
    cloud = io.read_pcd(map_path)
    traj = io.read_trajectory(traj_path)
    records = io.read_descriptors(desc_path)
    try:
        return RobotRun(cloud, traj, records)
    except ValueError as exc:
        raise CliError(f"{desc_path}: {exc}") from None


def _run_name(map_path) -> str:
    return Path(map_path).stem


def _params(args) -> RegistrationParams:
    try:
        return RegistrationParams().with_overrides(
            max_correspondence_distance=args.max_corr_dist,
            voxel_leaf=args.voxel_leaf,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _load_gt(path):
    """Either ``{"transform": [16]}`` or a simulator sidecar with run frames."""
    if not Path(path).is_file():
        raise CliError(f"{path}: no such file")
    doc = io.read_json(path)
    if not isinstance(doc, dict):
        raise CliError(f"{path}: ground truth must be a JSON object")
    return doc


def _gt_between(doc, path, own: str, incoming: str) -> Transform:
    """Transform taking ``incoming``'s frame into ``own``'s."""
    if "transform" in doc:
        return io.transform_from_json(doc["transform"], path)
    frames = {r["name"]: r["frame_offset"] for r in doc.get("runs", []) if "name" in r}
    for name in (own, incoming):
        if name not in frames:
            raise CliError(f"{path}: no frame for run {name!r}")
    fa = io.transform_from_json(frames[own], path)
    fb = io.transform_from_json(frames[incoming], path)
    return se3_compose(fa, se3_inverse(fb))


def _radius(args, gt_doc) -> float:
    if args.radius is not None:
        r = args.radius
    elif gt_doc is not None and "radius" in gt_doc:
        r = float(gt_doc["radius"])
    else:
        r = DEFAULT_RADIUS
    if not r > 0:
        raise CliError("--radius must be positive")
    return float(r)


def _write_cloud(path, cloud, leaf):
    if leaf:
        cloud = voxel_downsample(cloud, leaf)
    io.write_pcd(path, cloud)


# ---------------------------------------------------------------- commands


def cmd_merge(args) -> int:
    own = _load_run(args.map_a, args.traj_a, args.desc_a)
    incoming = _load_run(args.map_b, args.traj_b, args.desc_b)
    gt_doc = _load_gt(args.gt) if args.gt else None
    radius = _radius(args, gt_doc)
    params = _params(args)
    names = (_run_name(args.map_a), _run_name(args.map_b))
    gt = _gt_between(gt_doc, args.gt, *names) if gt_doc is not None else None

    merged, report = merge_pair(
        own,
        incoming,
        radius,
        params,
        ground_truth=gt,
        raw_initial=args.raw_eq9,
        overlap_voxel=OVERLAP_VOXEL if gt is not None else None,
    )
    report.config.update(
        {
            "command": "merge",
            "inputs": {
                "own": names[0],
                "incoming": names[1],
                "files": [[args.map_a, args.traj_a, args.desc_a], [args.map_b, args.traj_b, args.desc_b]],
            },
            "merged_voxel": args.merged_voxel,
        }
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_cloud(out / "merged.pcd", merged, args.merged_voxel)
    initial = np.concatenate([own.map, se3_apply(report.initial_transform, incoming.map)], axis=0)
    _write_cloud(out / "initial_alignment.pcd", initial, args.merged_voxel)
    io.write_json(out / "report.json", report.to_dict())
    _print_summary([report])
    return 0


def cmd_merge_recursive(args) -> int:
    if len(args.run) < 2:
        raise CliError("merge-recursive needs at least two --run MAP TRAJ DESC triples")
    runs = [_load_run(*triple) for triple in args.run]
    names = [_run_name(triple[0]) for triple in args.run]
    gt_doc = _load_gt(args.gt) if args.gt else None
    radius = _radius(args, gt_doc)
    params = _params(args)
    gts = [_gt_between(gt_doc, args.gt, names[0], n) for n in names[1:]] if gt_doc is not None else None

    out = Path(args.out)
    try:
        merged, reports = merge_recursive(runs, radius, params, gts)
    except MergeError as exc:
        if exc.reports:
            out.mkdir(parents=True, exist_ok=True)
            io.write_json(out / "report.json", {"reports": _tag_reports(exc.reports, names, args), "failed": str(exc)})
        raise
    out.mkdir(parents=True, exist_ok=True)
    _write_cloud(out / "merged.pcd", merged, args.merged_voxel)
    io.write_json(out / "report.json", {"reports": _tag_reports(reports, names, args)})
    _print_summary(reports)
    return 0


def _tag_reports(reports, names, args):
    out = []
    for i, rep in enumerate(reports):
        rep.config.update(
            {
                "command": "merge-recursive",
                "inputs": {"own": names[0], "incoming": names[i + 1], "fold_step": i + 1, "files": args.run},
                "merged_voxel": args.merged_voxel,
            }
        )
        out.append(rep.to_dict())
    return out


def _print_summary(reports):
    for rep in reports:
        msg = f"T12 yaw {np.degrees(rep.transform.yaw):+.3f} deg, t = {np.round(rep.transform.translation, 4).tolist()}"
        if rep.t_e is not None:
            msg += f", T_e {rep.t_e:.4f} m, R_e {rep.r_e:.4f} deg"
        msg += f", {rep.timings['total']:.3f} s"
        print(msg)


def _read_spec(path):
    if not Path(path).is_file():
        raise CliError(f"{path}: no such file")
    return io.read_json(path)


def cmd_simulate(args) -> int:
    from .sim.scenarios import BUNDLED, RunSpec, Scenario, load_scenario

    try:
        if args.spec in BUNDLED and not Path(args.spec).exists():
            scenario = load_scenario(args.spec)
        else:
            doc = _read_spec(args.spec)
            if "runs" in doc:
                if args.runs:
                    raise CliError("scenario file already lists its runs; drop the extra run files")
                scenario = Scenario.from_dict(doc)
            else:
                if not args.runs:
                    raise CliError("a world spec needs at least one run spec file")
                runs = [RunSpec.from_dict(_read_spec(p)).to_dict() for p in args.runs]
                scenario = Scenario.from_dict({"name": Path(args.spec).stem, "world": doc, "runs": runs})
        if args.radius is not None:
            scenario = Scenario.from_dict({**scenario.to_dict(), "radius": args.radius})
        sim = scenario.build(args.seed)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, io.FormatError):
            raise
        raise CliError(f"{args.spec}: {exc}") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_stl(out / "world.stl", sim.world.triangles)
    io.write_json(out / "scenario.json", scenario.to_dict())
    runs_meta = []
    for spec, run in zip(scenario.runs, sim.runs):
        io.write_pcd(out / f"{spec.name}.pcd", run.run.map)
        io.write_trajectory(out / f"{spec.name}.csv", run.run.trajectory)
        io.write_descriptors(out / f"{spec.name}.frds", run.run.records)
        runs_meta.append(
            {
                "name": spec.name,
                "frame_offset": run.frame_offset.to_list(),
                "trajectory_length": run.run.trajectory.length,
                "points": len(run.run.map),
                "records": len(run.run.records),
                "vertical_fov": spec.vertical_fov,
            }
        )
    ref = scenario.runs[0].name
    sidecar = {
        "scenario": scenario.name,
        "seed": sim.seed,
        "world_id": sim.world.world_id,
        "radius": scenario.radius,
        "runs": runs_meta,
        "ground_truth": {
            "reference": ref,
            "transforms": {s.name: gt.to_list() for s, gt in zip(scenario.runs[1:], sim.ground_truths())},
        },
    }
    io.write_json(out / "ground_truth.json", sidecar)
    for m in runs_meta:
        print(f"{m['name']}: {m['points']} points, {m['records']} records, {m['trajectory_length']:.1f} m")
    return 0


def cmd_descriptors(args) -> int:
    traj = io.read_trajectory(args.traj) if args.traj else None
    if traj is not None and len(traj) < len(args.scans):
        raise CliError(f"{args.traj}: {len(traj)} poses for {len(args.scans)} scans")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, path in enumerate(args.scans):
        if not Path(path).is_file():
            raise CliError(f"{path}: no such file")
        img = spherical_project(io.read_pcd(path), 16, 256, args.vfov, args.max_range)
        q, w = extract_descriptors(img)
        if traj is not None:
            k, pos = int(traj.timesteps[i]), traj.positions[i]
        else:
            k, pos = i, np.zeros(3)
        records.append(DescriptorRecord(q, w, pos, k))
        if args.pgm:
            write_pgm(img, out / f"{Path(path).stem}.pgm")
    io.write_descriptors(out / "descriptors.frds", records)
    print(f"{len(records)} records -> {out / 'descriptors.frds'}")
    return 0


def _eval_rows(doc, path, gt_doc, gt_path):
    if isinstance(doc, dict) and "reports" in doc:
        items = doc["reports"]
    else:
        items = [doc]
    if not isinstance(items, list) or not items:
        raise CliError(f"{path}: no reports")
    rows = []
    for i, d in enumerate(items):
        try:
            rep = MergeReport.from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{path}: report {i} does not match the report schema ({exc})") from None
        t_e, r_e = rep.t_e, rep.r_e
        inputs = rep.config.get("inputs", {})
        label = f"{inputs.get('own', 'own')}<-{inputs.get('incoming', i + 1)}"
        if gt_doc is not None:
            gt = _gt_between(gt_doc, gt_path, inputs.get("own"), inputs.get("incoming"))
            err = transform_errors(gt, rep.transform)
            t_e, r_e = err.translation_error, err.rotation_error
        rows.append(
            {
                "merge": label,
                "overlap_percent": rep.overlap_percent,
                "t_e": t_e,
                "r_e": r_e,
                "time_s": rep.timings.get("total"),
            }
        )
    return rows


def _fmt(v, digits=3):
    return "-" if v is None else f"{v:.{digits}f}"


def cmd_eval(args) -> int:
    if not Path(args.report).is_file():
        raise CliError(f"{args.report}: no such file")
    doc = io.read_json(args.report)
    gt_path = args.gt_file or args.gt
    gt_doc = _load_gt(gt_path) if gt_path else None
    rows = _eval_rows(doc, args.report, gt_doc, gt_path)

    print(f"{'MERGE':<24} {'OVERLAP (%)':>11} {'T_e (m)':>9} {'R_e (deg)':>10} {'TIME (s)':>9}")
    for r in rows:
        print(
            f"{r['merge']:<24} {_fmt(r['overlap_percent'], 1):>11} {_fmt(r['t_e']):>9} "
            f"{_fmt(r['r_e']):>10} {_fmt(r['time_s']):>9}"
        )
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EVAL_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else r[k]) for k in EVAL_COLUMNS})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(buf.getvalue(), encoding="utf-8")
    else:
        print()
        print(buf.getvalue(), end="")
    return 0


# ------------------------------------------------------------------ parser


def _add_registration_flags(p):
    p.add_argument("--radius", type=float, default=None, help=f"sphere radius in m (default {DEFAULT_RADIUS:g})")
    p.add_argument("--max-corr-dist", type=float, default=None, help="GICP correspondence distance in m")
    p.add_argument("--voxel-leaf", type=float, default=None, help="GICP voxel leaf in m, 0 disables")
    p.add_argument("--gt", default=None, help="ground-truth JSON (transform or simulator sidecar)")
    p.add_argument("--raw-eq9", action="store_true", help="initial guess rotates about the origin")
    p.add_argument("--merged-voxel", type=float, default=None, help="voxel filter for written clouds")
    p.add_argument("--out", default="frame_out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="framemerge", description="Descriptor-triggered 3D map merging.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge an incoming run into an own run")
    for side in ("a", "b"):
        p.add_argument(f"map_{side}")
        p.add_argument(f"traj_{side}")
        p.add_argument(f"desc_{side}")
    _add_registration_flags(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("merge-recursive", help="fold several runs into the first one")
    p.add_argument("--run", nargs=3, action="append", default=[], metavar=("MAP", "TRAJ", "DESC"))
    _add_registration_flags(p)
    p.set_defaults(func=cmd_merge_recursive)

    p = sub.add_parser("simulate", help="simulate a scenario and export its runs")
    p.add_argument("spec", help="bundled scenario (fig3, fig4), scenario JSON, or world JSON")
    p.add_argument("runs", nargs="*", help="run spec JSON files when spec is a world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--out", default="frame_out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("descriptors", help="descriptor records for scan PCD files")
    p.add_argument("scans", nargs="+")
    p.add_argument("--traj", default=None, help="trajectory CSV giving each scan's timestep and position")
    p.add_argument("--vfov", type=float, default=30.0)
    p.add_argument("--max-range", type=float, default=50.0)
    p.add_argument("--pgm", action="store_true", help="also dump depth images")
    p.add_argument("--out", default="frame_out")
    p.set_defaults(func=cmd_descriptors)

    p = sub.add_parser("eval", help="Table-I style metrics for a report")
    p.add_argument("report")
    p.add_argument("gt_file", nargs="?", default=None, help="ground-truth sidecar")
    p.add_argument("--gt", default=None)
    p.add_argument("--out", default=None, help="directory for eval.csv (default: CSV on stdout)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MergeError as exc:
        print(f"error: stage {exc.stage}: {exc.message}", file=sys.stderr)
        return 2
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
