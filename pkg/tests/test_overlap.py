import numpy as np
import pytest

from framemerge.descriptors import DescriptorRecord
from framemerge.geometry import se3_apply
from framemerge.overlap import (
    NoOverlapError,
    OverlapMatch,
    build_index,
    initial_transform,
    query_best_pair,
)


def records_from(q, offset=0, rng=None):
    rng = rng or np.random.default_rng(0)
    pos = rng.normal(scale=50, size=(len(q), 3))
    return [DescriptorRecord(v, np.ones(64), p, offset + i) for i, (v, p) in enumerate(zip(q, pos))]


def unit_rows(rng, n):
    q = rng.normal(size=(n, 64))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def brute_force(own, incoming):
    best = None
    for a in own:
        for b in incoming:
            d = np.sqrt(np.sum((a.q - b.q) ** 2))
            key = (d, a.timestep, b.timestep)
            if best is None or key < best:
                best = key
    return best


def test_empty_index_rejected():
    with pytest.raises(ValueError):
        build_index([])


def test_singleton_index(rng):
    recs = records_from(unit_rows(rng, 1))
    idx = build_index(recs)
    assert len(idx) == 1
    rec, _ = idx.nearest(unit_rows(rng, 1)[0])
    assert rec is recs[0]


def test_nearest_matches_linear_scan(rng):
    recs = records_from(unit_rows(rng, 1000))
    idx = build_index(recs)
    q = np.array([r.q for r in recs])
    for v in unit_rows(rng, 50):
        rec, d = idx.nearest(v)
        dist = np.sqrt(np.sum((q - v) ** 2, axis=1))
        assert rec.timestep == int(np.argmin(dist))
        assert d == pytest.approx(dist.min(), abs=1e-12)


def test_duplicate_q_distance_zero(rng):
    q = unit_rows(rng, 3)
    recs = records_from(np.vstack([q, q[1:2]]))
    rec, d = build_index(recs).nearest(q[1])
    assert d == 0.0 and rec.timestep in (1, 3)


def test_self_query_distance_zero(rng):
    recs = records_from(unit_rows(rng, 20))
    m = query_best_pair(build_index(recs), recs)
    assert m.descriptor_distance == 0.0
    # ties go to the smallest own timestep, then the smallest incoming one
    assert (m.own_timestep, m.incoming_timestep) == (0, 0)


def test_forced_arithmetic_example():
    e0 = np.eye(64)[0]
    e1 = np.eye(64)[1]
    own = [DescriptorRecord(e0, np.ones(64), np.zeros(3), 0)]
    inc = [DescriptorRecord(e1, np.ones(64), np.zeros(3), 0), DescriptorRecord(0.9 * e0, np.ones(64), np.ones(3), 1)]
    m = query_best_pair(build_index(own), inc)
    assert m.incoming_timestep == 1
    assert m.descriptor_distance == pytest.approx(0.1, abs=1e-15)


def test_tie_break_prefers_smaller_own_timestep():
    v = np.eye(64)[3]
    own = [DescriptorRecord(v, np.ones(64), np.zeros(3), k) for k in (9, 4, 7)]
    inc = [DescriptorRecord(v, np.ones(64), np.zeros(3), k) for k in (5, 2)]
    m = query_best_pair(build_index(own), inc)
    assert (m.own_timestep, m.incoming_timestep) == (4, 2)


def test_no_discriminative_overlap():
    z = [DescriptorRecord(np.zeros(64), np.ones(64), np.zeros(3), 0)]
    with pytest.raises(NoOverlapError, match="no discriminative overlap"):
        query_best_pair(build_index(z), z)


def test_empty_incoming_rejected(rng):
    with pytest.raises(ValueError):
        query_best_pair(build_index(records_from(unit_rows(rng, 2))), [])


@pytest.mark.parametrize("n,m", [(1, 1), (7, 300), (300, 7), (1500, 1200)])
def test_best_pair_equals_brute_force(rng, n, m):
    own = records_from(unit_rows(rng, n), rng=rng)
    inc = records_from(unit_rows(rng, m), offset=100, rng=rng)
    ref = brute_force(own, inc) if n * m < 5000 else None
    got = query_best_pair(build_index(own), inc)
    if ref is None:
        qo = np.array([r.q for r in own])
        qi = np.array([r.q for r in inc])
        d = np.sqrt(((qo[:, None, :] - qi[None, :, :]) ** 2).sum(-1))
        i, j = np.unravel_index(np.argmin(d), d.shape)
        ref = (d[i, j], own[i].timestep, inc[j].timestep)
    assert (got.own_timestep, got.incoming_timestep) == ref[1:]
    assert abs(got.descriptor_distance - ref[0]) <= 1e-12


def test_top_k_listing(rng):
    own = records_from(unit_rows(rng, 30))
    inc = records_from(unit_rows(rng, 10), offset=50)
    idx = build_index(own)
    top = idx.top_k(inc, 5)
    assert len(top) == 5
    assert [t[2] for t in top] == sorted(t[2] for t in top)
    m = query_best_pair(idx, inc)
    assert top[0][:2] == (m.own_timestep, m.incoming_timestep)


def test_deterministic(rng):
    own = records_from(unit_rows(rng, 500))
    inc = records_from(unit_rows(rng, 400), offset=7)
    a = query_best_pair(build_index(own), inc)
    b = query_best_pair(build_index(own), inc)
    assert a.to_dict() == b.to_dict()


def test_match_dict_round_trip():
    m = OverlapMatch(3, 4, np.array([1.0, 2, 3]), np.array([4.0, 5, 6]), 0.25)
    back = OverlapMatch.from_dict(m.to_dict())
    assert back.to_dict() == m.to_dict()


def match(p1, p2):
    return OverlapMatch(0, 0, np.asarray(p1, float), np.asarray(p2, float), 0.0)


def test_initial_transform_identity():
    t = initial_transform(match((1, 2, 3), (1, 2, 3)), 0.0)
    assert np.allclose(t.matrix, np.eye(4))


def test_initial_transform_pure_translation():
    t = initial_transform(match((10, 0, 0), (4, 0, 0)), 0.0)
    assert np.allclose(t.rotation, np.eye(3))
    assert np.allclose(t.translation, (6, 0, 0))


def test_initial_transform_half_turn_maps_p2_onto_p1():
    t = initial_transform(match((0, 0, 0), (2, 0, 0)), np.pi)
    assert np.allclose(se3_apply(t, [[2.0, 0, 0]]), [[0, 0, 0]], atol=1e-9)


def test_raw_form_rotates_about_origin():
    t = initial_transform(match((0, 0, 0), (2, 0, 0)), np.pi, raw=True)
    assert np.allclose(t.translation, (-2, 0, 0))
    # the literal form sends p2 to (-4, 0, 0), not onto p1
    assert np.allclose(se3_apply(t, [[2.0, 0, 0]]), [[-4, 0, 0]], atol=1e-9)
    same = initial_transform(match((5, 1, 0), (2, 3, 1)), 0.0, raw=True)
    assert np.allclose(same.matrix, initial_transform(match((5, 1, 0), (2, 3, 1)), 0.0).matrix)


def test_initial_transform_always_maps_p2_to_p1(rng):
    for _ in range(100):
        p1, p2 = rng.normal(scale=100, size=(2, 3))
        t = initial_transform(match(p1, p2), rng.uniform(-np.pi, np.pi))
        assert np.allclose(se3_apply(t, p2[None])[0], p1, atol=1e-9)
