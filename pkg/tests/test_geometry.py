import math

import numpy as np
import pytest

from topicmatch.geometry import (DegenerateConfigurationError, EvalReport, InsufficientDataError,
                                 PairResult, auc, corner_error, estimate_homography_dlt,
                                 image_corners, mma, normalize_homography, ransac_homography,
                                 warp_point)
from topicmatch.numerics import make_rng

from geometry_cases import SIZE, outlier_instance, random_homography

GENERIC = np.array([[3.0, 5.0], [100.0, 12.0], [20.0, 90.0], [110.0, 120.0]])


def translation(tx, ty):
    return np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]])


class TestWarp:
    def test_identity(self):
        assert np.array_equal(warp_point(np.eye(3), [4.0, 7.0]), [4.0, 7.0])

    def test_translation(self):
        assert np.allclose(warp_point(translation(2, -3), GENERIC), GENERIC + [2, -3])

    def test_inverse_roundtrip(self):
        h = random_homography(5)
        back = warp_point(np.linalg.inv(h), warp_point(h, GENERIC))
        assert np.abs(back - GENERIC).max() < 1e-9

    def test_point_at_infinity(self):
        h = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
        with pytest.raises(DegenerateConfigurationError):
            warp_point(h, [0.0, 3.0])


class TestDLT:
    def test_four_point_recovery(self):
        h = random_homography(1)
        est = estimate_homography_dlt(GENERIC, warp_point(h, GENERIC))
        assert np.linalg.norm(est - normalize_homography(h)) < 1e-8

    def test_identity(self):
        assert np.linalg.norm(estimate_homography_dlt(GENERIC, GENERIC) - np.eye(3)) < 1e-12

    def test_bottom_right_is_one(self):
        h = random_homography(2) * 7.0
        assert estimate_homography_dlt(GENERIC, warp_point(h, GENERIC))[2, 2] == 1.0

    def test_many_seeds_noiseless(self):
        worst = 0.0
        for seed in range(100):
            h = random_homography(seed)
            pa = make_rng(seed, 1).uniform(0, SIZE - 1, (12, 2))
            est = estimate_homography_dlt(pa, warp_point(h, pa))
            worst = max(worst, np.linalg.norm(est - normalize_homography(h)))
        assert worst < 1e-8

    def test_collinear(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]])
        with pytest.raises(DegenerateConfigurationError):
            estimate_homography_dlt(pts, GENERIC)

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            estimate_homography_dlt(GENERIC[:3], GENERIC[:3])


class TestRansac:
    def test_exact_inliers(self):
        h = random_homography(3)
        pa = make_rng(3, 2).uniform(0, SIZE - 1, (20, 2))
        pb = warp_point(h, pa)
        est, mask = ransac_homography(pa, pb, 3.0, 0.99999, seed=0)
        assert mask.all()
        assert np.linalg.norm(est - normalize_homography(h)) < 1e-6
        # zero outliers: the consensus set is everything, so the refit is DLT on all points
        assert np.array_equal(est, estimate_homography_dlt(pa, pb))

    def test_twelve_plus_eight_outliers(self):
        pa, pb, h, inlier = outlier_instance(11, n=20, outlier_frac=0.4)
        est, mask = ransac_homography(pa, pb, 3.0, 0.99999, seed=11)
        assert mask.sum() >= 12 and mask[inlier].all()
        assert corner_error(est, h, (SIZE, SIZE)) < 0.5

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            ransac_homography(GENERIC[:3], GENERIC[:3])

    def test_deterministic(self):
        pa, pb, _, _ = outlier_instance(4, outlier_frac=0.5)
        a = ransac_homography(pa, pb, seed=9)
        b = ransac_homography(pa, pb, seed=9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestCornerError:
    def test_zero(self):
        h = random_homography(6)
        assert corner_error(h, h, (SIZE, SIZE)) == 0.0

    def test_one_pixel_shift(self):
        h = random_homography(7)
        assert corner_error(translation(1, 0) @ h, h, (SIZE, SIZE)) == pytest.approx(1.0, abs=1e-12)

    def test_per_corner_oracle(self):
        ha, hb = random_homography(8), random_homography(9)
        total = 0.0
        for x, y in image_corners((96, 128)):
            pa = ha @ [x, y, 1.0]
            pb = hb @ [x, y, 1.0]
            total += math.hypot(pa[0] / pa[2] - pb[0] / pb[2], pa[1] / pa[2] - pb[1] / pb[2])
        assert abs(corner_error(ha, hb, (96, 128)) - total / 4) < 1e-12


class TestAuc:
    def test_extremes(self):
        assert auc([0.0, 0.0, 0.0], 3) == 1.0
        assert auc([4.0, 10.0], 3) == 0.0
        assert auc([], 3) == 0.0

    def test_hand_trapezoid(self):
        # the curve closes at the threshold with the recall of errors strictly below it:
        # (0,0), (1,1/2), (3,1/2), area 0.25 + 1.0 = 1.25
        recall_pts = [(0.0, 0.0), (1.0, 0.5), (3.0, 0.5)]
        area = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(recall_pts, recall_pts[1:]))
        assert auc([1.0, 3.0], 3) == pytest.approx(area / 3, abs=1e-15)

    def test_monotone_and_bounded(self):
        errs = make_rng(0, 3).exponential(4.0, 200)
        vals = [auc(errs, t) for t in (1, 3, 5, 10, 20)]
        assert all(0 <= v <= 1 for v in vals)
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestMMA:
    def test_exact(self):
        h = random_homography(10)
        assert (mma(GENERIC, warp_point(h, GENERIC), h) == 1.0).all()

    def test_single_error(self):
        out = mma([[10.0, 10.0]], [[12.5, 10.0]], np.eye(3))
        assert out.tolist() == [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]

    def test_brute_force(self):
        rng = make_rng(1, 4)
        h = random_homography(1)
        pa = rng.uniform(0, SIZE, (50, 2))
        pb = warp_point(h, pa) + rng.normal(0, 4, (50, 2))
        expected = []
        for t in range(1, 11):
            hits = 0
            for a, b in zip(pa, pb):
                w = h @ [a[0], a[1], 1.0]
                hits += math.hypot(w[0] / w[2] - b[0], w[1] / w[2] - b[1]) <= t
            expected.append(hits / 50)
        out = mma(pa, pb, h)
        assert out.tolist() == expected
        assert all(b >= a for a, b in zip(out, out[1:]))

    def test_empty(self):
        assert (mma(np.zeros((0, 2)), np.zeros((0, 2)), np.eye(3)) == 0).all()


class TestReport:
    def make(self):
        m = np.linspace(0.1, 1.0, 10)
        return EvalReport([PairResult(0, 10, 8, 1.0, m, 5, 4, 0.5),
                           PairResult(1, 3, 0, math.inf, m * 0, 2, 0, math.nan)])

    def test_aggregates(self):
        rep = self.make()
        assert rep.coarse_precision() == pytest.approx(4 / 7)
        assert rep.topic_agreement() == 0.5
        assert np.array_equal(rep.corner_errors, [1.0, math.inf])

    def test_text_and_csv(self):
        rep = self.make()
        text = rep.to_text()
        assert "auc@3px" in text and "coarse_precision" in text
        lines = rep.to_csv().strip().splitlines()
        assert len(lines) == 3 and lines[0].startswith("seed,")

    def test_empty(self):
        assert EvalReport([]).to_text().strip() == "pairs\t0"
