import numpy as np
import pytest

from crowdrefine import geometry as geo


def lattice_box(rng, span=60, max_side=40):
    x1 = rng.integers(0, span)
    y1 = rng.integers(0, span)
    return np.array([x1, y1, x1 + rng.integers(1, max_side),
                     y1 + rng.integers(1, max_side)], dtype=np.float64)


def grid_overlap(a, b):
    """Count unit lattice cells inside each region; exact for integer boxes."""
    x0 = int(min(a[0], b[0]))
    x1 = int(max(a[2], b[2]))
    y0 = int(min(a[1], b[1]))
    y1 = int(max(a[3], b[3]))
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys, indexing="ij")

    def inside(box):
        return (gx >= box[0]) & (gx < box[2]) & (gy >= box[1]) & (gy < box[3])

    in_a, in_b = inside(a), inside(b)
    inter = np.sum(in_a & in_b)
    union = np.sum(in_a | in_b)
    hull = gx.size
    return inter, union, hull


class TestArea:
    def test_rectangle(self):
        assert geo.area((0, 0, 2, 3)) == 6.0

    def test_degenerate_width(self):
        assert geo.area((1, 1, 1, 5)) == 0.0

    def test_square(self):
        assert geo.area((0, 0, 2, 2)) == 4.0


class TestIou:
    def test_identical(self):
        assert geo.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert geo.iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_partial_overlap(self):
        # intersection 1, union 7
        assert geo.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)

    def test_zero_area_union(self):
        assert geo.iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0

    def test_symmetry_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = lattice_box(rng), lattice_box(rng)
            assert geo.iou(a, b) == geo.iou(b, a)

    def test_self_iou_is_one(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = lattice_box(rng)
            assert geo.iou(a, a) == 1.0

    def test_grid_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            a, b = lattice_box(rng), lattice_box(rng)
            inter, union, _ = grid_overlap(a, b)
            expected = inter / union if union else 0.0
            assert geo.iou(a, b) == pytest.approx(expected, abs=1e-3)


class TestIoa:
    def test_contained(self):
        assert geo.ioa((1, 1, 2, 2), (0, 0, 5, 5)) == 1.0

    def test_disjoint(self):
        assert geo.ioa((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_half_covered(self):
        assert geo.ioa((0, 0, 2, 2), (0, 0, 2, 1)) == 0.5

    def test_degenerate_box(self):
        assert geo.ioa((1, 1, 1, 1), (0, 0, 5, 5)) == 0.0


class TestGiou:
    def test_identical(self):
        assert geo.giou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0

    def test_separated(self):
        # hull area 3, union 2, iou 0 -> -(1/3)
        assert geo.giou((0, 0, 1, 1), (2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-12)

    def test_nested_equals_iou(self):
        outer, inner = (0, 0, 4, 4), (1, 1, 3, 3)
        assert geo.giou(outer, inner) == pytest.approx(geo.iou(outer, inner), abs=1e-12)

    def test_never_exceeds_iou(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            a, b = lattice_box(rng), lattice_box(rng)
            assert geo.giou(a, b) <= geo.iou(a, b) + 1e-12

    def test_grid_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            a, b = lattice_box(rng), lattice_box(rng)
            inter, union, hull = grid_overlap(a, b)
            iou = inter / union if union else 0.0
            expected = iou - (hull - union) / hull
            assert geo.giou(a, b) == pytest.approx(expected, abs=1e-3)


class TestCenterInside:
    def test_centered(self):
        assert geo.center_inside((1, 1, 3, 3), (0, 0, 4, 4))

    def test_outside(self):
        assert not geo.center_inside((10, 10, 12, 12), (0, 0, 4, 4))

    def test_on_edge_inclusive(self):
        # center of (3, 0, 5, 2) is (4, 1), on the right edge of the target
        assert geo.center_inside((3, 0, 5, 2), (0, 0, 4, 4))


class TestFindNeighbors:
    def test_identical_box(self):
        idx = geo.find_neighbors((0, 0, 2, 2), [(0, 0, 2, 2)], 0.4)
        assert idx.tolist() == [0]

    def test_below_threshold(self):
        idx = geo.find_neighbors((0, 0, 2, 2), [(1, 1, 3, 3)], 0.4)
        assert idx.tolist() == []

    def test_boundary_inclusive_default(self):
        # iou exactly 1/3: (0,0,2,1) vs (1,0,3,1) -> inter 1, union 3
        idx = geo.find_neighbors((0, 0, 2, 1), [(1, 0, 3, 1)], 1 / 3)
        assert idx.tolist() == [0]

    def test_strict_mode_excludes_threshold(self):
        idx = geo.find_neighbors((0, 0, 2, 1), [(1, 0, 3, 1)], 1 / 3, strict=True)
        assert idx.tolist() == []

    def test_strict_zero_is_positive_overlap(self):
        pool = [(5, 5, 6, 6), (1.5, 0, 3, 2), (0, 0, 2, 2)]
        idx = geo.find_neighbors((0, 0, 2, 2), pool, 0.0, strict=True)
        assert idx.tolist() == [1, 2]

    def test_empty_pool(self):
        assert geo.find_neighbors((0, 0, 1, 1), [], 0.4).tolist() == []

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            geo.find_neighbors((0, 0, 1, 1), [(0, 0, 1, 1)], 1.5)


class TestPairwiseIou:
    def test_singleton_identity(self):
        m = geo.pairwise_iou([(0, 0, 1, 1)], [(0, 0, 1, 1)])
        assert m.shape == (1, 1) and m[0, 0] == 1.0

    def test_empty_side(self):
        m = geo.pairwise_iou([], [(0, 0, 1, 1), (1, 1, 2, 2)])
        assert m.shape == (0, 2)

    def test_matches_elementwise(self):
        rng = np.random.default_rng(5)
        a = np.stack([lattice_box(rng) for _ in range(25)])
        b = np.stack([lattice_box(rng) for _ in range(40)])
        m = geo.pairwise_iou(a, b)
        for i in range(a.shape[0]):
            for j in range(b.shape[0]):
                assert m[i, j] == geo.iou(a[i], b[j])


class TestEncodePair:
    def test_self_pair_geometry(self):
        g = geo.pair_geometry((0, 0, 2, 2), (0, 0, 2, 2))
        eps = geo.LOG_EPS
        np.testing.assert_allclose(g, [np.log(eps), np.log(eps), 0.0, 0.0, 1.0])

    def test_output_length(self):
        for d_enc in (40, 160, 320):
            assert geo.encode_pair((0, 0, 2, 2), (1, 1, 3, 3), d_enc).shape == (d_enc,)

    def test_deterministic(self):
        a = geo.encode_pair((0, 0, 2, 4), (1, 1, 3, 3), 320)
        b = geo.encode_pair((0, 0, 2, 4), (1, 1, 3, 3), 320)
        assert np.array_equal(a, b)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            geo.encode_pair((0, 0, 0, 2), (1, 1, 3, 3), 320)

    def test_bad_dimension_rejected(self):
        with pytest.raises(ValueError):
            geo.encode_pair((0, 0, 2, 2), (1, 1, 3, 3), 37)

    def test_continuity(self):
        base = geo.encode_pair((0, 0, 10, 10), (2, 2, 12, 12), 320)
        nudged = geo.encode_pair((0, 0, 10, 10), (2 + 1e-7, 2, 12 + 1e-7, 12), 320)
        assert np.max(np.abs(base - nudged)) < 1e-5

    def test_depends_only_on_arguments(self):
        # same pair encoded in different "contexts" is identical
        one = geo.encode_pair((0, 0, 4, 8), (1, 2, 5, 9), 160)
        two = geo.encode_pair((0, 0, 4, 8), (1, 2, 5, 9), 160)
        assert np.array_equal(one, two)
