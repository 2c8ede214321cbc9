import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codetensor.errors import DegenerateBand, DimError, FormatError
from codetensor.lsh import (
    LshParams,
    build_index,
    get_vec,
    index_bytes,
    linear_scan,
    lsh_search,
    lsh_search_with_distance,
    parse_index,
    random_hyperplanes,
    read_index,
    segment_id,
    select_significant,
    signature_bits,
    write_index,
)
from codetensor.segmentation import GlcmFeatures, TextureSegment

ZERO_FEATURES = GlcmFeatures(0.0, 0.0, 1.0, 1.0)


def seg(source, pixels, row_start=0):
    px = np.asarray(pixels, dtype=np.uint8)
    return TextureSegment(source, row_start, row_start + px.shape[0], px, ZERO_FEATURES)


def tile_oracle(px):
    px = np.asarray(px, dtype=float)
    h, w = px.shape
    out = []
    for i in range(8):
        for j in range(8):
            tile = px[i * h // 8 : (i + 1) * h // 8, j * w // 8 : (j + 1) * w // 8]
            out.append(tile.mean() / 255.0)
    return np.array(out)


def pair_at_angle(rng, dim, theta):
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    u = rng.standard_normal(dim)
    u -= u @ v * v
    u /= np.linalg.norm(u)
    return v, math.cos(theta) * v + math.sin(theta) * u


# ---------------------------------------------------------------- get_vec


def test_constant_segments():
    assert np.array_equal(get_vec(np.full((64, 256), 255)), np.ones(64))
    assert np.array_equal(get_vec(np.zeros((64, 256))), np.zeros(64))


def test_half_split_segment():
    px = np.zeros((64, 256))
    px[:, 128:] = 255
    v = get_vec(px)
    assert np.array_equal(v, tile_oracle(px))
    assert np.array_equal(v.reshape(8, 8), np.tile([0, 0, 0, 0, 1, 1, 1, 1], (8, 1)))


@given(st.integers(64, 200), st.integers(0, 999))
def test_tile_means_match_oracle(h, seed):
    px = np.random.default_rng(seed).integers(0, 256, (h, 256))
    assert np.allclose(get_vec(px), tile_oracle(px), atol=1e-12)


def test_undersized_segment():
    with pytest.raises(DegenerateBand):
        get_vec(np.zeros((63, 256)))


# ---------------------------------------------------------------- build and search


def test_params_validation():
    for bad in (dict(k=0), dict(l=0), dict(r=0.0), dict(dim=0), dict(metric="cosine")):
        with pytest.raises(ValueError):
            LshParams(**bad)


def test_empty_index():
    idx = build_index([], LshParams(dim=4))
    assert len(idx) == 0 and all(t == {} for t in idx.tables)
    assert lsh_search(idx, np.ones(4)) == []


def test_single_entry_in_every_table():
    p = LshParams(k=6, l=5, dim=4)
    idx = build_index([("a", np.arange(4.0))], p)
    assert all(sum(ids.count("a") for ids in t.values()) == 1 for t in idx.tables)


def test_duplicates_share_signatures():
    v = np.random.default_rng(0).standard_normal(16)
    idx = build_index([("a", v), ("b", v.copy())], LshParams(dim=16))
    for t in idx.tables:
        assert any(set(ids) == {"a", "b"} for ids in t.values())


def test_zero_dot_product_is_set_bit():
    planes = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    assert signature_bits(planes, [0.0, -1.0]).tolist() == [[True, False]]


def test_dimension_mismatch():
    with pytest.raises(DimError):
        build_index([("a", np.ones(3)), ("b", np.ones(4))], LshParams(dim=3))
    idx = build_index([("a", np.ones(3))], LshParams(dim=3))
    with pytest.raises(DimError):
        lsh_search(idx, np.ones(5))


def test_self_query_and_far_query():
    rng = np.random.default_rng(3)
    vecs = rng.random((30, 64))
    idx = build_index([(f"s{i}", v) for i, v in enumerate(vecs)], LshParams())
    for i, v in enumerate(vecs):
        assert f"s{i}" in lsh_search(idx, v, r=1e-9)
    assert lsh_search(idx, -10 * np.ones(64), r=1e-3) == []


def test_results_sorted_by_distance_then_id():
    base = np.ones(8)
    entries = [("b", base), ("a", base), ("c", base + 0.01), ("d", base + 0.02)]
    idx = build_index(entries, LshParams(k=2, l=4, dim=8, r=1.0))
    hits = lsh_search_with_distance(idx, base)
    assert [h[0] for h in hits] == ["a", "b", "c", "d"]
    assert all(x[1] <= y[1] for x, y in zip(hits, hits[1:]))


def test_search_is_subset_of_linear_scan():
    rng = np.random.default_rng(8)
    vecs = rng.random((200, 64))
    idx = build_index([(f"s{i:03d}", v) for i, v in enumerate(vecs)], LshParams(r=1.5))
    for q in rng.random((20, 64)):
        got = lsh_search(idx, q)
        exact = linear_scan(idx, q)
        assert set(got) <= set(exact)
        assert got == [i for i in exact if i in set(got)]


def test_planted_near_duplicate_recall():
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        vecs = rng.random((50, 64))
        step = rng.standard_normal(64)
        q = vecs[7] + 0.01 * step / np.linalg.norm(step)
        idx = build_index([(f"s{i}", v) for i, v in enumerate(vecs)], LshParams(r=0.05, seed=trial))
        assert linear_scan(idx, q) == ["s7"]
        hits += "s7" in lsh_search(idx, q)
    assert hits >= 99


def test_hamming_metric():
    rng = np.random.default_rng(2)
    vecs = rng.standard_normal((10, 16))
    idx = build_index([(f"s{i}", v) for i, v in enumerate(vecs)], LshParams(dim=16, metric="hamming", r=0.5))
    assert lsh_search(idx, vecs[3])[0] == "s3"


def test_build_is_deterministic():
    vecs = np.random.default_rng(4).random((40, 64))
    entries = [(f"s{i}", v) for i, v in enumerate(vecs)]
    assert index_bytes(build_index(entries, LshParams(seed=9))) == index_bytes(build_index(entries, LshParams(seed=9)))
    assert index_bytes(build_index(entries, LshParams(seed=9))) != index_bytes(build_index(entries, LshParams(seed=10)))


# ---------------------------------------------------------------- hash family statistics


def test_single_bit_collision_follows_angle():
    rng = np.random.default_rng(5)
    for theta in (0.3, 1.0, 2.0):
        agree = 0
        n = 2000
        for t in range(n):
            v, w = pair_at_angle(rng, 16, theta)
            plane = rng.standard_normal(16)
            agree += (plane @ v >= 0) == (plane @ w >= 0)
        assert abs(agree / n - (1 - theta / math.pi)) < 0.04


@settings(max_examples=20)
@given(st.floats(0.05, 3.0), st.integers(0, 10_000))
def test_near_pair_collides_more_often_than_far_pair(theta, seed):
    rng = np.random.default_rng(seed)
    near, far = theta * 0.25, min(theta * 4, 3.1)
    planes = random_hyperplanes(LshParams(k=1, l=4000, dim=8, seed=seed))[:, 0, :]
    rates = []
    for ang in (near, far):
        v, w = pair_at_angle(rng, 8, ang)
        rates.append(np.mean((planes @ v >= 0) == (planes @ w >= 0)))
    assert rates[0] >= rates[1] - 0.03


# ---------------------------------------------------------------- selection


def tile_image(values):
    """64x256 segment whose 8x8 tile means are ``values``."""
    return np.kron(np.asarray(values, dtype=np.uint8).reshape(8, 8), np.ones((8, 32), dtype=np.uint8))


def test_all_unique_segments_take_first_cap():
    rng = np.random.default_rng(0)
    segs = [seg("x", tile_image(rng.integers(0, 256, 64)), 64 * i) for i in range(6)]
    idx = build_index(segs, LshParams())
    chosen = select_significant({"x": segs}, idx, cap=4)["x"]
    assert [c.rank for c in chosen] == [0, 1, 2, 3]
    assert [c.segment for c in chosen] == segs[:4]


def test_identical_segments_collapse():
    px = tile_image(np.random.default_rng(1).integers(0, 256, 64))
    a, b = seg("x", px, 0), seg("x", px.copy(), 64)
    idx = build_index([a, b], LshParams())
    chosen = select_significant({"x": [a, b]}, idx)["x"]
    assert len(chosen) == 1


def frequency_oracle(per_sample, ident, r):
    vecs = {segment_id(s): get_vec(s) for segs in per_sample.values() for s in segs}
    target = vecs[ident]
    return sum(
        any(np.linalg.norm(get_vec(s) - target) <= r for s in segs) for segs in per_sample.values()
    )


def test_rare_payload_ranked_before_library():
    rng = np.random.default_rng(11)
    library = tile_image(rng.integers(0, 256, 64))
    per_sample = {}
    for n in range(20):
        name = f"s{n:02d}"
        segs = [seg(name, tile_image(rng.integers(0, 256, 64)), 0)]
        if n < 18:
            segs.insert(0, seg(name, library, 64))
        if n == 0:
            segs.append(seg(name, tile_image(rng.integers(0, 256, 64)), 128))
        per_sample[name] = segs
    params = LshParams(r=0.1)
    idx = build_index([s for segs in per_sample.values() for s in segs], params)
    lib_id, pay_id = segment_id(per_sample["s00"][0]), segment_id(per_sample["s00"][2])
    assert frequency_oracle(per_sample, lib_id, params.r) == 18
    assert frequency_oracle(per_sample, pay_id, params.r) == 1
    sel = select_significant(per_sample, idx)
    for name, chosen in sel.items():
        ids = [segment_id(c.segment) for c in chosen]
        if name == "s00":
            assert ids.index(pay_id) < ids.index(lib_id)
        if int(name[1:]) < 18:
            assert ids[-1].endswith(":64:128")
        freqs = [c.bucket_frequency for c in chosen]
        assert freqs == sorted(freqs)


def test_cap_applies():
    rng = np.random.default_rng(2)
    segs = [seg("x", tile_image(rng.integers(0, 256, 64)), 64 * i) for i in range(12)]
    idx = build_index(segs, LshParams())
    assert len(select_significant({"x": segs}, idx, cap=8)["x"]) == 8


# ---------------------------------------------------------------- persistence


def test_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    idx = build_index([(f"s{i}", v) for i, v in enumerate(rng.random((25, 64)))], LshParams(k=5, l=3, seed=2))
    write_index(idx, tmp_path / "x.clsh")
    back = read_index(tmp_path / "x.clsh")
    assert back.params == idx.params
    assert np.array_equal(back.hyperplanes, idx.hyperplanes)
    assert back.tables == idx.tables
    assert index_bytes(back) == index_bytes(idx)
    q = rng.random(64)
    assert lsh_search(back, q, 2.0) == lsh_search(idx, q, 2.0)


def test_corrupt_index():
    raw = index_bytes(build_index([("a", np.ones(4))], LshParams(dim=4)))
    with pytest.raises(FormatError):
        parse_index(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        parse_index(raw[:-3])
    with pytest.raises(FormatError):
        parse_index(raw + b"\0")
