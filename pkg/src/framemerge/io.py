"""File formats: PCD clouds, trajectory CSV, FRDS descriptor sets, STL worlds, JSON.

Every reader reports malformed input as a ``FormatError`` naming the file
and the byte offset at which parsing failed.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .descriptors import DESCRIPTOR_DIM, DescriptorRecord
from .geometry import Trajectory, Transform, as_points


class FormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = int(offset)
        self.message = message


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


# --------------------------------------------------------------------- PCD

_PCD_TYPES = {
    ("F", 4): "<f4",
    ("F", 8): "<f8",
    ("I", 1): "<i1",
    ("I", 2): "<i2",
    ("I", 4): "<i4",
    ("I", 8): "<i8",
    ("U", 1): "<u1",
    ("U", 2): "<u2",
    ("U", 4): "<u4",
    ("U", 8): "<u8",
}


def write_pcd(path, cloud, binary: bool = True) -> None:
    """Write x y z as float32, binary (little-endian) or ASCII."""
    pts = as_points(cloud).astype("<f4")
    n = len(pts)
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        "FIELDS x y z\n"
        "SIZE 4 4 4\n"
        "TYPE F F F\n"
        "COUNT 1 1 1\n"
        f"WIDTH {n}\n"
        "HEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\n"
        f"DATA {'binary' if binary else 'ascii'}\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(np.ascontiguousarray(pts).tobytes())
        else:
            # 9 significant digits round-trip any float32
            f.write("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts.tolist()).encode("ascii"))


def read_pcd(path) -> np.ndarray:
    """Read the x, y, z fields of an ASCII or binary PCD file as float64."""
    data = _read_bytes(path)
    header = {}
    pos = 0
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError(path, pos, "header ends before DATA line")
        raw = data[pos:end]
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise FormatError(path, pos, "non-ASCII header line") from None
        line_start, pos = pos, end + 1
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        header[key.upper()] = (rest.split(), line_start)
        if key.upper() == "DATA":
            break

    def field(name, default=None):
        if name in header:
            return header[name]
        if default is not None:
            return default, pos
        raise FormatError(path, pos, f"missing {name} header line")

    fields, _ = field("FIELDS")
    sizes, off_size = field("SIZE")
    types, off_type = field("TYPE")
    counts, off_count = field("COUNT", ["1"] * len(fields))
    if not (len(fields) == len(sizes) == len(types) == len(counts)):
        raise FormatError(path, off_size, "FIELDS/SIZE/TYPE/COUNT lengths differ")
    for axis in "xyz":
        if axis not in fields:
            raise FormatError(path, header["FIELDS"][1], f"no '{axis}' field")
    try:
        points_v, off_points = field("POINTS")
        npts = int(points_v[0])
        sizes = [int(s) for s in sizes]
        counts = [int(c) for c in counts]
    except (ValueError, IndexError):
        raise FormatError(path, off_size, "non-integer SIZE/COUNT/POINTS") from None
    if npts < 0:
        raise FormatError(path, off_points, "negative POINTS")

    dtypes = []
    for name, t, s, c in zip(fields, types, sizes, counts):
        key = (t.upper(), s)
        if key not in _PCD_TYPES:
            raise FormatError(path, off_type, f"unsupported TYPE/SIZE {t}/{s}")
        dtypes.append((name, _PCD_TYPES[key], (c,)) if c > 1 else (name, _PCD_TYPES[key]))
    dtype = np.dtype(dtypes)

    mode = header["DATA"][0][0].lower() if header["DATA"][0] else ""
    if mode == "binary":
        need = npts * dtype.itemsize
        if len(data) - pos < need:
            raise FormatError(path, len(data), f"binary payload truncated, expected {need} bytes after offset {pos}")
        rec = np.frombuffer(data, dtype=dtype, count=npts, offset=pos)
        xyz = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    elif mode == "ascii":
        flat = [(name, c) for name, c in zip(fields, counts)]
        width = sum(counts)
        col = {}
        i = 0
        for name, c in flat:
            col[name] = i
            i += c
        xyz = np.empty((npts, 3))
        row = 0
        cursor = pos
        for raw in data[pos:].split(b"\n"):
            line_start, cursor = cursor, cursor + len(raw) + 1
            if not raw.strip():
                continue
            if row >= npts:
                raise FormatError(path, line_start, "more data rows than POINTS")
            parts = raw.split()
            if len(parts) != width:
                raise FormatError(path, line_start, f"expected {width} values, got {len(parts)}")
            try:
                xyz[row] = [float(parts[col["x"]]), float(parts[col["y"]]), float(parts[col["z"]])]
            except ValueError:
                raise FormatError(path, line_start, "unparseable number") from None
            row += 1
        if row != npts:
            raise FormatError(path, len(data), f"expected {npts} data rows, got {row}")
        # Text values are rounded to the declared field type, as in binary.
        for j, axis in enumerate("xyz"):
            xyz[:, j] = xyz[:, j].astype(dtype[axis].base)
    else:
        raise FormatError(path, header["DATA"][1], f"unsupported DATA mode {mode!r}")

    if not np.all(np.isfinite(xyz)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(xyz), axis=1))[0])
        off = pos + bad * dtype.itemsize if mode == "binary" else pos
        raise FormatError(path, off, f"non-finite coordinate in point {bad}")
    return xyz


# -------------------------------------------------------------- trajectory

TRAJECTORY_HEADER = ("k", "x", "y", "z", "yaw")


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for k, p, yaw in zip(traj.timesteps, traj.positions, traj.yaws):
            w.writerow([int(k), *(f"{v:.17g}" for v in (p[0], p[1], p[2], yaw))])


def read_trajectory(path) -> Trajectory:
    data = _read_bytes(path)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(path, exc.start, "not UTF-8 text") from None
    ks, pos, yaws = [], [], []
    offset = 0
    first = True
    for line in text.splitlines(keepends=True):
        start, offset = offset, offset + len(line.encode("utf-8"))
        if not line.strip():
            continue
        row = next(csv.reader(io.StringIO(line)))
        if first:
            if tuple(c.strip() for c in row) != TRAJECTORY_HEADER:
                raise FormatError(path, start, "header must be 'k,x,y,z,yaw'")
            first = False
            continue
        if len(row) != 5:
            raise FormatError(path, start, f"expected 5 columns, got {len(row)}")
        try:
            ks.append(int(row[0]))
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise FormatError(path, start, "unparseable number") from None
        pos.append(vals[:3])
        yaws.append(vals[3])
    if first:
        raise FormatError(path, 0, "empty trajectory file")
    try:
        return Trajectory(np.array(ks, dtype=np.int64), np.array(pos).reshape(-1, 3), np.array(yaws))
    except ValueError as exc:
        raise FormatError(path, 0, str(exc)) from None


# -------------------------------------------------------------------- FRDS

FRDS_MAGIC = b"FRDS"
FRDS_VERSION = 1
_FRDS_HEAD = struct.Struct("<4sHI")
_FRDS_RECORD = np.dtype(
    [("k", "<u4"), ("position", "<f8", (3,)), ("q", "<f4", (DESCRIPTOR_DIM,)), ("w", "<f4", (DESCRIPTOR_DIM,))]
)


def write_descriptors(path, records) -> None:
    records = list(records)
    buf = np.zeros(len(records), dtype=_FRDS_RECORD)
    for i, r in enumerate(records):
        if not 0 <= r.timestep < 2**32:
            raise ValueError(f"timestep {r.timestep} does not fit in u32")
        buf[i] = (r.timestep, r.position, r.q, r.w)
    with open(path, "wb") as f:
        f.write(_FRDS_HEAD.pack(FRDS_MAGIC, FRDS_VERSION, len(records)))
        f.write(buf.tobytes())


def read_descriptors(path) -> list[DescriptorRecord]:
    data = _read_bytes(path)
    if len(data) < _FRDS_HEAD.size:
        raise FormatError(path, len(data), "file shorter than FRDS header")
    magic, version, count = _FRDS_HEAD.unpack_from(data, 0)
    if magic != FRDS_MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}")
    if version != FRDS_VERSION:
        raise FormatError(path, 4, f"unsupported FRDS version {version}")
    need = _FRDS_HEAD.size + count * _FRDS_RECORD.itemsize
    if len(data) < need:
        done = (len(data) - _FRDS_HEAD.size) // _FRDS_RECORD.itemsize
        raise FormatError(path, _FRDS_HEAD.size + done * _FRDS_RECORD.itemsize, f"truncated record {done} of {count}")
    if len(data) > need:
        raise FormatError(path, need, "trailing bytes after last record")
    buf = np.frombuffer(data, dtype=_FRDS_RECORD, count=count, offset=_FRDS_HEAD.size)
    out = []
    for i, rec in enumerate(buf):
        try:
            out.append(DescriptorRecord(rec["q"].astype(np.float64), rec["w"].astype(np.float64), rec["position"], int(rec["k"])))
        except ValueError as exc:
            raise FormatError(path, _FRDS_HEAD.size + i * _FRDS_RECORD.itemsize, str(exc)) from None
    return out


# --------------------------------------------------------------------- STL


def write_stl(path, triangles) -> None:
    """Binary STL with per-facet normals."""
    tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    rec = np.zeros(len(tris), dtype=[("n", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    rec["n"] = n
    rec["v"] = tris
    with open(path, "wb") as f:
        f.write(b"framemerge tunnel world".ljust(80, b"\0"))
        f.write(struct.pack("<I", len(tris)))
        f.write(rec.tobytes())


def read_stl(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 84:
        raise FormatError(path, len(data), "file shorter than STL header")
    (count,) = struct.unpack_from("<I", data, 80)
    if len(data) != 84 + 50 * count:
        raise FormatError(path, 84, f"{count} facets need {84 + 50 * count} bytes, file has {len(data)}")
    rec = np.frombuffer(data, dtype=[("n", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")], count=count, offset=84)
    return rec["v"].astype(np.float64)


# -------------------------------------------------------------------- JSON


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj), encoding="utf-8")


def read_json(path):
    data = _read_bytes(path)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(path, exc.start, "not UTF-8 text") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(path, len(text[: exc.pos].encode("utf-8")), exc.msg) from None


def transform_from_json(value, path="<json>") -> Transform:
    try:
        return Transform.from_matrix(value)
    except (ValueError, TypeError) as exc:
        raise FormatError(path, 0, f"invalid transform: {exc}") from None
