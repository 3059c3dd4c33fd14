"""Overlap and boundary metrics, including the degenerate-mask conventions."""

import numpy as np
import pytest

from tsaseg.metrics import boundary_distances, class_metrics, dice, jaccard, surface_points


def mask(h, w, coords):
    m = np.zeros((h, w), dtype=bool)
    for r, c in coords:
        m[r, c] = True
    return m


class TestDiceJaccard:
    def test_hand_cases(self):
        a = mask(4, 4, [(0, 0), (0, 1), (1, 0), (1, 1)])
        b = mask(4, 4, [(1, 1), (1, 2), (2, 1), (2, 2)])
        # |A| = |B| = 4, intersection = 1, union = 7
        assert dice(a, b) == pytest.approx(2 * 1 / 8)
        assert jaccard(a, b) == pytest.approx(1 / 7)

    def test_identical_masks(self):
        a = mask(5, 5, [(2, 2), (2, 3)])
        assert dice(a, a) == 1.0
        assert jaccard(a, a) == 1.0

    def test_disjoint_masks(self):
        a = mask(5, 5, [(0, 0)])
        b = mask(5, 5, [(4, 4)])
        assert dice(a, b) == 0.0
        assert jaccard(a, b) == 0.0

    def test_both_empty_is_perfect(self):
        e = np.zeros((6, 6), dtype=bool)
        assert dice(e, e) == 1.0
        assert jaccard(e, e) == 1.0

    def test_one_empty_is_zero(self):
        e = np.zeros((6, 6), dtype=bool)
        a = mask(6, 6, [(3, 3)])
        assert dice(a, e) == 0.0
        assert jaccard(e, a) == 0.0

    def test_jaccard_dice_identity(self):
        """j = d / (2 - d) whenever the pair is not double-empty."""
        rng = np.random.default_rng(17)
        for _ in range(100):
            a = rng.random((12, 12)) < 0.3
            b = rng.random((12, 12)) < 0.3
            d = dice(a, b)
            assert jaccard(a, b) == pytest.approx(d / (2.0 - d), abs=1e-12)

    def test_integer_input_accepted(self):
        a = np.array([[0, 1], [1, 0]])
        assert dice(a, a) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((3, 3)), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            jaccard(np.zeros(9), np.zeros(9))


class TestSurfacePoints:
    def test_filled_square_has_hollow_surface(self):
        m = np.zeros((5, 5), dtype=bool)
        m[1:4, 1:4] = True
        pts = {tuple(p) for p in surface_points(m)}
        expected = {(r, c) for r in range(1, 4) for c in range(1, 4)} - {(2, 2)}
        assert pts == expected

    def test_single_pixel(self):
        pts = surface_points(mask(4, 4, [(2, 1)]))
        np.testing.assert_array_equal(pts, [[2, 1]])

    def test_image_border_counts_as_background(self):
        """A full image is all surface at its rim, hollow inside."""
        m = np.ones((4, 6), dtype=bool)
        pts = {tuple(p) for p in surface_points(m)}
        interior = {(r, c) for r in range(1, 3) for c in range(1, 5)}
        assert pts == {(r, c) for r in range(4) for c in range(6)} - interior

    def test_empty_mask(self):
        assert surface_points(np.zeros((3, 3), dtype=bool)).shape == (0, 2)

    def test_diagonal_neighbors_do_not_connect(self):
        """4-connectivity: a diagonal pair is two isolated surface pixels."""
        m = mask(4, 4, [(1, 1), (2, 2)])
        assert len(surface_points(m)) == 2


def brute_distances(a, b):
    """Quadratic-time oracle over pooled bidirectional surface distances."""
    sa = surface_points(a).astype(float)
    sb = surface_points(b).astype(float)
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95)), float(pooled.mean())


class TestBoundaryDistances:
    def test_identical_masks_are_zero(self):
        m = mask(8, 8, [(2, 2), (2, 3), (3, 2)])
        hd, asd, sent = boundary_distances(m, m)
        assert hd == 0.0 and asd == 0.0 and not sent

    def test_two_single_pixels(self):
        a = mask(10, 10, [(1, 1)])
        b = mask(10, 10, [(4, 5)])
        hd, asd, sent = boundary_distances(a, b)
        expected = float(np.hypot(3, 4))
        assert hd == pytest.approx(expected)
        assert asd == pytest.approx(expected)
        assert not sent

    def test_matches_brute_force(self):
        rng = np.random.default_rng(23)
        for _ in range(30):
            a = rng.random((16, 16)) < 0.25
            b = rng.random((16, 16)) < 0.25
            if not a.any() or not b.any():
                continue
            hd, asd, _ = boundary_distances(a, b)
            hd_o, asd_o = brute_distances(a, b)
            assert hd == pytest.approx(hd_o, abs=1e-9)
            assert asd == pytest.approx(asd_o, abs=1e-9)

    def test_both_empty(self):
        e = np.zeros((5, 5), dtype=bool)
        assert boundary_distances(e, e) == (0.0, 0.0, False)

    def test_one_empty_gives_diagonal_sentinel(self):
        e = np.zeros((3, 4), dtype=bool)
        a = mask(3, 4, [(1, 1)])
        hd, asd, sent = boundary_distances(a, e)
        assert sent
        assert hd == pytest.approx(5.0)  # hypot(3, 4)
        assert asd == pytest.approx(5.0)
        assert boundary_distances(e, a)[2]

    def test_asymmetric_pair_is_symmetric_metric(self):
        """Pooling both directions makes the result order-independent."""
        rng = np.random.default_rng(29)
        a = rng.random((12, 12)) < 0.2
        b = rng.random((12, 12)) < 0.4
        fwd = boundary_distances(a, b)
        rev = boundary_distances(b, a)
        assert fwd[0] == pytest.approx(rev[0], abs=1e-12)
        assert fwd[1] == pytest.approx(rev[1], abs=1e-12)
        assert fwd[2] == rev[2]


class TestClassMetrics:
    def test_extracts_single_class(self):
        pred = np.array([[0, 1, 1], [0, 2, 2], [0, 0, 0]])
        ref = np.array([[0, 1, 0], [0, 2, 2], [0, 0, 0]])
        row1 = class_metrics(pred, ref, 1)
        assert row1.dice == pytest.approx(2 * 1 / 3)
        row2 = class_metrics(pred, ref, 2)
        assert row2.dice == 1.0
        assert not row2.sentinel

    def test_absent_class_everywhere_is_perfect(self):
        z = np.zeros((4, 4), dtype=int)
        row = class_metrics(z, z, 3)
        assert row.dice == 1.0 and row.hd95 == 0.0 and not row.sentinel

    def test_sentinel_propagates(self):
        pred = np.zeros((4, 4), dtype=int)
        ref = np.zeros((4, 4), dtype=int)
        ref[1, 1] = 1
        row = class_metrics(pred, ref, 1)
        assert row.sentinel
        assert row.hd95 == pytest.approx(float(np.hypot(4, 4)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            class_metrics(np.zeros((3, 3), dtype=int), np.zeros((4, 4), dtype=int), 0)
