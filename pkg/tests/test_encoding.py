import itertools

import numpy as np
import pytest

from posecode.encoding import (
    Codebook,
    EncodingParams,
    SurfaceCodeEncoder,
    UnknownCodeError,
    build_codebook,
    build_hierarchy,
    convert_codebook,
    decode,
    pack_keys,
    radix_convert,
    truncate_lookup,
    verify_hierarchy,
)
from posecode.mesh import make_icosahedron, subdivide_midpoint, upsample_until


def small_cloud(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3)) * 10.0


@pytest.fixture(scope="module")
def sphere_codebook():
    mesh = upsample_until(make_icosahedron(50.0), 2**10)
    params = EncodingParams(radix=2, digits=10, seed=4)
    hierarchy = build_hierarchy(mesh, params)
    return mesh, hierarchy, build_codebook(mesh, hierarchy)


class TestEncodingParams:
    def test_n_classes(self):
        assert EncodingParams(2, 16).n_classes == 65536
        assert EncodingParams(4, 8).n_classes == 65536

    def test_validation(self):
        with pytest.raises(ValueError):
            EncodingParams(radix=1)
        with pytest.raises(ValueError):
            EncodingParams(digits=0)
        with pytest.raises(ValueError):
            EncodingParams(radix=2, digits=64)


class TestBuildHierarchy:
    def test_eight_points_singleton_leaves(self):
        pts = small_cloud(8)
        h = build_hierarchy(pts, EncodingParams(2, 3, seed=1))
        codes = {tuple(row) for row in h.assignments}
        assert len(codes) == 8  # all codes distinct: leaves are singletons

    def test_ten_points_leaf_sizes(self):
        # ceil/floor halving of 10 over 3 levels: sizes all in {1, 2}
        pts = small_cloud(10)
        h = build_hierarchy(pts, EncodingParams(2, 3, seed=2))
        keys = h.group_keys(3)
        sizes = np.unique(keys, return_counts=True)[1]
        assert set(sizes.tolist()) <= {1, 2}
        assert sizes.sum() == 10

    def test_cube_corners_axis_split(self):
        corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
        # oracle: enumerate all balanced 2-partitions; the variance-minimal
        # ones are exactly the three axis-plane splits
        best = None
        argbest = []
        for left in itertools.combinations(range(8), 4):
            right = tuple(i for i in range(8) if i not in left)
            v = sum(
                float(((corners[list(g)] - corners[list(g)].mean(0)) ** 2).sum())
                for g in (left, right)
            )
            if best is None or v < best - 1e-12:
                best, argbest = v, [frozenset(left)]
            elif abs(v - best) <= 1e-12:
                argbest.append(frozenset(left))
        axis_splits = [
            frozenset(i for i in range(8) if corners[i, ax] == 0.0) for ax in range(3)
        ]
        for s in axis_splits:
            assert s in argbest or (frozenset(range(8)) - s) in argbest

        h = build_hierarchy(corners, EncodingParams(2, 1, seed=0))
        got = frozenset(np.flatnonzero(h.assignments[:, 0] == 0))
        assert got in argbest or (frozenset(range(8)) - got) in argbest

    def test_precondition_too_many_classes(self):
        with pytest.raises(ValueError, match="exceeds vertex count"):
            build_hierarchy(small_cloud(7), EncodingParams(2, 3))

    def test_balance_invariant(self, sphere_codebook):
        _, hierarchy, _ = sphere_codebook
        verify_hierarchy(hierarchy)

    def test_prefix_property(self, sphere_codebook):
        # same j-digit prefix <=> same group at level j, for every level:
        # group keys must refine strictly as levels deepen, and each level's
        # partition must be exactly keyed by the prefix
        _, hierarchy, _ = sphere_codebook
        for j in range(hierarchy.digits + 1):
            keys = hierarchy.group_keys(j)
            prefixes = [tuple(row[:j]) for row in hierarchy.assignments]
            by_key = {}
            for i, k in enumerate(keys):
                by_key.setdefault(int(k), set()).add(prefixes[i])
            for members in by_key.values():
                assert len(members) == 1

    def test_determinism(self):
        pts = small_cloud(64)
        a = build_hierarchy(pts, EncodingParams(2, 4, seed=9))
        b = build_hierarchy(pts, EncodingParams(2, 4, seed=9))
        np.testing.assert_array_equal(a.assignments, b.assignments)

    def test_seed_changes_result(self):
        pts = small_cloud(64)
        a = build_hierarchy(pts, EncodingParams(2, 4, seed=0))
        b = build_hierarchy(pts, EncodingParams(2, 4, seed=1))
        assert not np.array_equal(a.assignments, b.assignments)

    def test_radix_partition_matches_binary(self):
        # same seed: the radix-4 hierarchy groups points exactly like the
        # binary hierarchy of twice the depth
        pts = small_cloud(128)
        bin_h = build_hierarchy(pts, EncodingParams(2, 6, seed=5))
        quad_h = build_hierarchy(pts, EncodingParams(4, 3, seed=5))
        np.testing.assert_array_equal(
            radix_convert(bin_h.assignments, 4, 2), quad_h.assignments
        )

    def test_nonbinary_radix_balanced(self):
        pts = small_cloud(30)
        h = build_hierarchy(pts, EncodingParams(3, 2, seed=1))
        verify_hierarchy(h)
        sizes = np.unique(h.group_keys(2), return_counts=True)[1]
        assert sizes.max() - sizes.min() <= 1


class TestCodebook:
    def test_singleton_leaf_centroid_is_vertex(self):
        pts = small_cloud(8)
        h = build_hierarchy(pts, EncodingParams(2, 3, seed=1))
        cb = build_codebook(pts, h)
        for i in range(8):
            np.testing.assert_array_equal(decode(cb, cb.code_of(i)), pts[i])

    def test_pair_leaf_centroid(self):
        pts = np.array([[0.0, 0, 0], [2.0, 0, 0], [50.0, 1, 0], [52.0, -1, 0]])
        h = build_hierarchy(pts, EncodingParams(2, 1, seed=0))
        cb = build_codebook(pts, h)
        cents = {tuple(np.round(c, 9)) for c in cb.centroids}
        assert (1.0, 0.0, 0.0) in cents
        assert (51.0, 0.0, 0.0) in cents

    def test_quantization_bound(self, sphere_codebook):
        mesh, _, cb = sphere_codebook
        # every vertex sits within its leaf diameter of its decoded centroid
        keys = pack_keys(cb.vertex_codes, cb.radix)
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        starts = np.unique(sorted_keys, return_index=True)[1]
        for chunk in np.split(order, starts[1:]):
            pts = mesh.vertices[chunk]
            centroid = decode(cb, cb.vertex_codes[chunk[0]])
            if len(pts) == 1:
                assert np.allclose(pts[0], centroid)
                continue
            diam = max(
                np.linalg.norm(a - b) for a, b in itertools.combinations(pts, 2)
            )
            assert np.linalg.norm(pts - centroid, axis=1).max() <= diam + 1e-12

    def test_all_codes_decode_on_complete_codebook(self, sphere_codebook):
        _, _, cb = sphere_codebook
        assert cb.n_leaves == 2**10
        for key in range(2**10):
            code = [(key >> (9 - j)) & 1 for j in range(10)]
            pt = decode(cb, code)
            assert np.isfinite(pt).all()

    def test_unknown_code_is_no_match(self):
        pts = small_cloud(6)  # 6 < 2^3: some leaves empty
        h = build_hierarchy(pts, EncodingParams(2, 3, seed=0))
        cb = build_codebook(pts, h)
        present = {tuple(int(x) for x in row) for row in cb.table_codes}
        missing = next(
            c for c in itertools.product((0, 1), repeat=3) if c not in present
        )
        with pytest.raises(UnknownCodeError):
            decode(cb, missing)
        pts_out, known = cb.decode_many(np.array([list(missing), list(cb.table_codes[0])]))
        assert not known[0] and known[1]

    def test_decode_many_matches_decode(self, sphere_codebook):
        _, _, cb = sphere_codebook
        rng = np.random.default_rng(0)
        picks = rng.integers(0, cb.n_leaves, size=100)
        pts, known = cb.decode_many(cb.table_codes[picks])
        assert known.all()
        for row, pick in zip(pts, picks):
            np.testing.assert_array_equal(row, cb.centroids[pick])

    def test_bad_code_shape_and_range(self, sphere_codebook):
        _, _, cb = sphere_codebook
        with pytest.raises(ValueError):
            cb.decode([0, 1])
        with pytest.raises(ValueError):
            cb.decode([7] * cb.digits)


class TestRadixConvert:
    def test_documented_example(self):
        code = np.array([1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1])
        np.testing.assert_array_equal(radix_convert(code, 256), [254, 255])

    def test_zero_code(self):
        np.testing.assert_array_equal(
            radix_convert(np.zeros(16, dtype=int), 16), np.zeros(4, dtype=int)
        )

    def test_round_trip_random_codes(self):
        rng = np.random.default_rng(3)
        codes = rng.integers(0, 2, size=(10_000, 16)).astype(np.uint16)
        for r in (4, 16, 256):
            back = radix_convert(radix_convert(codes, r, 2), 2, r)
            np.testing.assert_array_equal(back, codes)

    def test_indivisible_length(self):
        with pytest.raises(ValueError, match="not divisible"):
            radix_convert(np.zeros(15, dtype=int), 4)

    def test_non_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            radix_convert(np.zeros(16, dtype=int), 3)

    def test_numeric_value_preserved(self):
        rng = np.random.default_rng(8)
        codes = rng.integers(0, 2, size=(200, 16))
        for r in (4, 16, 256):
            converted = radix_convert(codes, r, 2)
            np.testing.assert_array_equal(
                pack_keys(converted, r), pack_keys(codes, 2)
            )


class TestConvertCodebook:
    def test_partition_and_points_identical(self, sphere_codebook):
        _, _, cb = sphere_codebook
        rng = np.random.default_rng(1)
        sample = cb.table_codes[rng.integers(0, cb.n_leaves, size=500)]
        base_pts, _ = cb.decode_many(sample)
        for r in (4, 32):
            converted = convert_codebook(cb, r)
            assert converted.n_leaves == cb.n_leaves
            np.testing.assert_array_equal(converted.counts, cb.counts)
            pts, known = converted.decode_many(radix_convert(sample, r, 2))
            assert known.all()
            np.testing.assert_array_equal(pts, base_pts)


class TestTruncateLookup:
    def test_full_length_is_identity(self, sphere_codebook):
        _, _, cb = sphere_codebook
        assert truncate_lookup(cb, cb.digits) is cb

    def test_one_digit_centroids_mean_to_mesh_centroid(self, sphere_codebook):
        mesh, _, cb = sphere_codebook
        t = truncate_lookup(cb, 1)
        assert t.n_leaves == 2
        overall = (t.centroids * t.counts[:, None]).sum(0) / t.counts.sum()
        np.testing.assert_allclose(overall, mesh.vertices.mean(axis=0), atol=1e-9)

    def test_truncated_centroid_matches_raw_vertices(self, sphere_codebook):
        mesh, hierarchy, cb = sphere_codebook
        j = cb.digits - 1
        t = truncate_lookup(cb, j)
        keys = pack_keys(cb.vertex_codes[:, :j], cb.radix)
        for row in range(0, t.n_leaves, 37):
            key = pack_keys(t.table_codes[row][None, :], t.radix)[0]
            members = mesh.vertices[keys == key]
            np.testing.assert_allclose(
                t.centroids[row], members.mean(axis=0), atol=1e-9
            )

    def test_bad_keep(self, sphere_codebook):
        _, _, cb = sphere_codebook
        with pytest.raises(ValueError):
            truncate_lookup(cb, 0)
        with pytest.raises(ValueError):
            truncate_lookup(cb, cb.digits + 1)


class TestSurfaceCodeEncoder:
    def test_fit_transform_identity_on_training_points(self):
        pts = small_cloud(32)
        enc = SurfaceCodeEncoder(radix=2, digits=5, random_state=0).fit(pts)
        np.testing.assert_array_equal(enc.transform(pts), enc.codes_)

    def test_inverse_transform_returns_centroids(self):
        pts = small_cloud(32)
        enc = SurfaceCodeEncoder(radix=2, digits=5, random_state=0).fit(pts)
        points = enc.inverse_transform(enc.codes_[:4])
        expect, _ = enc.codebook_.decode_many(enc.codes_[:4])
        np.testing.assert_array_equal(points, expect)

    def test_get_params(self):
        enc = SurfaceCodeEncoder(radix=4, digits=8, random_state=3)
        assert enc.get_params() == {"radix": 4, "digits": 8, "random_state": 3}


def test_fingerprint_binds_codebook_to_vertices():
    pts = small_cloud(16)
    h = build_hierarchy(pts, EncodingParams(2, 4, seed=0))
    cb = build_codebook(pts, h)
    import hashlib

    assert cb.mesh_fingerprint == hashlib.sha256(
        np.ascontiguousarray(pts).tobytes()
    ).digest()
