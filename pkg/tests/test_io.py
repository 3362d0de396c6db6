import json
import struct

import numpy as np
import pytest

from framemerge import io
from framemerge.descriptors import DescriptorRecord
from framemerge.geometry import Trajectory, se3_from_yaw_translation
from framemerge.io import FormatError


def random_cloud(rng, n=500):
    return rng.normal(scale=20.0, size=(n, 3))


def random_records(rng, n=7):
    out = []
    for k in range(n):
        q = rng.normal(size=64)
        w = rng.uniform(0, 30, size=64)
        out.append(DescriptorRecord(q / np.linalg.norm(q), w, rng.normal(size=3) * 50, 3 * k + 1))
    return out


# -- PCD ----------------------------------------------------------------------------


@pytest.mark.parametrize("binary", [True, False])
def test_pcd_round_trip_f32(tmp_path, rng, binary):
    cloud = random_cloud(rng)
    path = tmp_path / "c.pcd"
    io.write_pcd(path, cloud, binary=binary)
    back = io.read_pcd(path)
    assert back.shape == cloud.shape
    assert np.array_equal(back, cloud.astype(np.float32).astype(np.float64))


def test_pcd_empty_cloud(tmp_path):
    path = tmp_path / "e.pcd"
    io.write_pcd(path, np.zeros((0, 3)))
    assert io.read_pcd(path).shape == (0, 3)


def test_pcd_extra_fields_and_types(tmp_path):
    header = (
        "# .PCD v0.7\nVERSION 0.7\nFIELDS intensity x y z ring\nSIZE 4 8 8 8 2\nTYPE F F F F U\n"
        "COUNT 1 1 1 1 1\nWIDTH 2\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS 2\nDATA binary\n"
    )
    dt = np.dtype([("i", "<f4"), ("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("r", "<u2")])
    rows = np.array([(0.5, 1.0, 2.0, 3.0, 7), (0.1, -4.0, 5.5, 6.25, 9)], dtype=dt)
    path = tmp_path / "x.pcd"
    path.write_bytes(header.encode() + rows.tobytes())
    assert np.array_equal(io.read_pcd(path), [[1, 2, 3], [-4, 5.5, 6.25]])


def test_pcd_truncated_payload_reports_offset(tmp_path, rng):
    path = tmp_path / "t.pcd"
    io.write_pcd(path, random_cloud(rng, 10))
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError) as err:
        io.read_pcd(path)
    assert err.value.offset == len(data) - 5
    assert str(path) in str(err.value)


def test_pcd_bad_ascii_row_offset(tmp_path):
    text = "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\nWIDTH 2\nHEIGHT 1\nPOINTS 2\nDATA ascii\n"
    good = "1 2 3\n"
    path = tmp_path / "a.pcd"
    path.write_text(text + good + "4 five 6\n")
    with pytest.raises(FormatError) as err:
        io.read_pcd(path)
    assert err.value.offset == len(text) + len(good)


def test_pcd_missing_axis(tmp_path):
    path = tmp_path / "m.pcd"
    path.write_text("FIELDS x y\nSIZE 4 4\nTYPE F F\nCOUNT 1 1\nPOINTS 0\nDATA ascii\n")
    with pytest.raises(FormatError, match="'z'"):
        io.read_pcd(path)


def test_pcd_missing_file(tmp_path):
    with pytest.raises(OSError):
        io.read_pcd(tmp_path / "nope.pcd")


# -- trajectory CSV -----------------------------------------------------------------


def test_trajectory_round_trip(tmp_path, rng):
    n = 40
    traj = Trajectory(np.arange(n) * 2, rng.normal(size=(n, 3)) * 100, rng.uniform(-np.pi, np.pi, n))
    path = tmp_path / "t.csv"
    io.write_trajectory(path, traj)
    back = io.read_trajectory(path)
    assert np.array_equal(back.timesteps, traj.timesteps)
    assert np.max(np.abs(back.positions - traj.positions)) <= 1e-9
    assert np.max(np.abs(back.yaws - traj.yaws)) <= 1e-9
    assert path.read_text().splitlines()[0] == "k,x,y,z,yaw"


def test_trajectory_bad_header(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("t,x,y,z,yaw\n0,0,0,0,0\n")
    with pytest.raises(FormatError) as err:
        io.read_trajectory(path)
    assert err.value.offset == 0


def test_trajectory_bad_row_offset(tmp_path):
    head = "k,x,y,z,yaw\n0,1,2,3,0.5\n"
    path = tmp_path / "t.csv"
    path.write_text(head + "1,1,2\n")
    with pytest.raises(FormatError, match="5 columns") as err:
        io.read_trajectory(path)
    assert err.value.offset == len(head)


# -- FRDS ---------------------------------------------------------------------------


def test_descriptor_round_trip_f32(tmp_path, rng):
    recs = random_records(rng)
    path = tmp_path / "d.frds"
    io.write_descriptors(path, recs)
    back = io.read_descriptors(path)
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert b.timestep == a.timestep
        assert np.array_equal(b.position, a.position)
        assert np.allclose(b.q, a.q, rtol=2**-23, atol=0)
        assert np.array_equal(b.q, a.q.astype(np.float32).astype(np.float64))
        assert np.array_equal(b.w, a.w.astype(np.float32).astype(np.float64))


def test_descriptor_file_layout(tmp_path, rng):
    recs = random_records(rng, 3)
    path = tmp_path / "d.frds"
    io.write_descriptors(path, recs)
    data = path.read_bytes()
    magic, version, count = struct.unpack_from("<4sHI", data)
    assert (magic, version, count) == (b"FRDS", 1, 3)
    assert len(data) == 10 + 3 * (4 + 24 + 256 + 256)


def test_descriptor_truncated_and_trailing(tmp_path, rng):
    path = tmp_path / "d.frds"
    io.write_descriptors(path, random_records(rng, 2))
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(FormatError, match="truncated record 1") as err:
        io.read_descriptors(path)
    assert err.value.offset == 10 + 540
    path.write_bytes(data + b"\0")
    with pytest.raises(FormatError, match="trailing") as err:
        io.read_descriptors(path)
    assert err.value.offset == len(data)
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        io.read_descriptors(path)


# -- STL ----------------------------------------------------------------------------


def test_stl_round_trip(tmp_path, rng):
    tris = rng.normal(size=(25, 3, 3)) * 10
    path = tmp_path / "w.stl"
    io.write_stl(path, tris)
    assert path.stat().st_size == 84 + 50 * 25
    back = io.read_stl(path)
    assert np.array_equal(back, tris.astype(np.float32).astype(np.float64))


def test_stl_short_file(tmp_path, rng):
    path = tmp_path / "w.stl"
    io.write_stl(path, rng.normal(size=(2, 3, 3)))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="2 facets"):
        io.read_stl(path)


# -- JSON ---------------------------------------------------------------------------


def test_json_stable_key_order(tmp_path):
    path = tmp_path / "r.json"
    io.write_json(path, {"b": 1, "a": {"d": 2, "c": 3}})
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert text.index('"c"') < text.index('"d"')
    assert io.read_json(path) == {"a": {"c": 3, "d": 2}, "b": 1}


def test_json_error_offset_is_in_bytes(tmp_path):
    path = tmp_path / "r.json"
    # the two-byte character shifts the byte offset past the character index
    path.write_text('{"é": 1,, }', encoding="utf-8")
    with pytest.raises(FormatError) as err:
        io.read_json(path)
    assert err.value.offset == len('{"é": 1,'.encode("utf-8"))


def test_transform_from_json():
    t = se3_from_yaw_translation(0.3, [1, 2, 3])
    back = io.transform_from_json(json.loads(json.dumps(t.to_list())))
    assert np.allclose(back.matrix, t.matrix, atol=1e-15)
    with pytest.raises(FormatError, match="invalid transform"):
        io.transform_from_json([1, 2, 3])
