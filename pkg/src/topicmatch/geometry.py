"""Homography estimation (normalized DLT, RANSAC) and matching metrics."""
from dataclasses import dataclass, field
import csv
import io
import math

import numpy as np

from .numerics import ContractError, make_rng


class DegenerateConfigurationError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


AUC_THRESHOLDS = (3, 5, 10)
MMA_THRESHOLDS = tuple(range(1, 11))


def normalize_homography(h):
    h = np.asarray(h, dtype=np.float64)
    if abs(h[2, 2]) < 1e-15:
        raise DegenerateConfigurationError("homography has vanishing bottom-right entry")
    return h / h[2, 2]


def warp_point(h, p):
    """Apply ``h`` to one (x, y) point or an N x 2 array of points."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    hom = pts @ h[:, :2].T + h[:, 2]
    w = hom[:, 2:]
    if np.any(np.abs(w) <= 1e-12):
        raise DegenerateConfigurationError("point maps to infinity")
    out = hom[:, :2] / w
    return out[0] if single else out


def _hartley_transform(pts):
    c = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if mean_dist < 1e-12:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def has_collinear_triple(pts, tol=1e-9):
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    scale = max(1.0, float(np.abs(pts).max()))
    for a in range(n):
        for b in range(a + 1, n):
            for c in range(b + 1, n):
                u = pts[b] - pts[a]
                v = pts[c] - pts[a]
                if abs(u[0] * v[1] - u[1] * v[0]) <= tol * scale * scale:
                    return True
    return False


def estimate_homography_dlt(pts_a, pts_b):
    """Least-squares homography A -> B from >= 4 correspondences (Hartley-normalized)."""
    pa = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    if len(pa) != len(pb):
        raise ContractError("point sets differ in length")
    if len(pa) < 4:
        raise InsufficientDataError(f"need >= 4 correspondences, got {len(pa)}")
    if len(pa) == 4 and (has_collinear_triple(pa) or has_collinear_triple(pb)):
        raise DegenerateConfigurationError("three of four points are collinear")
    ta = _hartley_transform(pa)
    tb = _hartley_transform(pb)
    na = pa @ ta[:2, :2].T + ta[:2, 2]
    nb = pb @ tb[:2, :2].T + tb[:2, 2]
    n = len(pa)
    x, y = na[:, 0], na[:, 1]
    u, v = nb[:, 0], nb[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    rows_u = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    rows_v = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)
    a = np.empty((2 * n, 9))
    a[0::2] = rows_u
    a[1::2] = rows_v
    _, s, vt = np.linalg.svd(a)
    # the null direction must be unique: the 8th singular value stays clear of zero
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateConfigurationError("rank-deficient DLT system")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.solve(tb, hn @ ta)
    return normalize_homography(h)


def reprojection_error(h, pts_a, pts_b):
    hom = np.asarray(pts_a) @ h[:, :2].T + h[:, 2]
    w = hom[:, 2:]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = hom[:, :2] / w
    err = np.sqrt(((proj - pts_b) ** 2).sum(axis=1))
    err[~np.isfinite(err) | (np.abs(w[:, 0]) <= 1e-12)] = np.inf
    return err


def adaptive_iterations(inlier_ratio, confidence, max_iters, sample_size=4):
    num = math.log(max(1.0 - confidence, 1e-300))
    denom_arg = 1.0 - inlier_ratio ** sample_size
    if denom_arg <= 1e-300:
        return 0
    denom = math.log(denom_arg)
    if denom >= 0 or -num >= max_iters * (-denom):
        return max_iters
    return int(round(num / denom))


def ransac_homography(pts_a, pts_b, threshold=3.0, confidence=0.99999, seed=0, max_iters=2000):
    """4-point RANSAC with adaptive stopping, then DLT refits on the consensus set."""
    pa = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = len(pa)
    if n < 4:
        raise InsufficientDataError(f"need >= 4 matches, got {n}")
    rng = make_rng(seed, 0x52414E53)
    best_mask, best_count = None, 0
    needed = max_iters
    it = 0
    while it < needed:
        it += 1
        sample = rng.choice(n, 4, replace=False)
        try:
            h = estimate_homography_dlt(pa[sample], pb[sample])
        except (DegenerateConfigurationError, np.linalg.LinAlgError):
            continue
        mask = reprojection_error(h, pa, pb) <= threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            needed = min(needed, adaptive_iterations(count / n, confidence, max_iters))
    if best_mask is None or best_count < 4:
        raise DegenerateConfigurationError("no non-degenerate consensus found")
    mask = best_mask
    h = estimate_homography_dlt(pa[mask], pb[mask])
    for _ in range(5):
        new_mask = reprojection_error(h, pa, pb) <= threshold
        if np.array_equal(new_mask, mask) or new_mask.sum() < 4:
            break
        mask = new_mask
        h = estimate_homography_dlt(pa[mask], pb[mask])
    return h, mask


def image_corners(image_hw):
    h, w = image_hw
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])


def corner_error(h_est, h_gt, image_hw):
    c = image_corners(image_hw)
    return float(np.linalg.norm(warp_point(h_est, c) - warp_point(h_gt, c), axis=1).mean())


def auc(errors, threshold):
    """Area under the cumulative recall curve on [0, threshold], divided by threshold."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    if len(errors) == 0:
        return 0.0
    recall = np.arange(1, len(errors) + 1) / len(errors)
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    last = int(np.searchsorted(errors, threshold))
    r = np.concatenate([recall[:last], [recall[last - 1]]])
    e = np.concatenate([errors[:last], [threshold]])
    return float(np.trapezoid(r, x=e) / threshold)


def mma(pts_a, pts_b, h_gt, thresholds=MMA_THRESHOLDS):
    pa = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    if len(pa) == 0:
        return np.zeros(len(thresholds))
    err = np.linalg.norm(warp_point(h_gt, pa) - pb, axis=1)
    return np.array([(err <= t).mean() for t in thresholds])


@dataclass
class PairResult:
    seed: int
    n_matches: int
    n_inliers: int
    corner_error: float
    mma: np.ndarray
    n_coarse: int = 0
    n_coarse_correct: int = 0
    topic_agreement: float = math.nan

    @property
    def coarse_precision(self):
        return self.n_coarse_correct / self.n_coarse if self.n_coarse else math.nan

    @property
    def inlier_ratio(self):
        return self.n_inliers / self.n_matches if self.n_matches else 0.0


@dataclass
class EvalReport:
    pairs: list = field(default_factory=list)
    auc_thresholds: tuple = AUC_THRESHOLDS
    mma_thresholds: tuple = MMA_THRESHOLDS

    @property
    def corner_errors(self):
        return np.array([p.corner_error for p in self.pairs])

    def auc(self):
        return {t: auc(self.corner_errors, t) for t in self.auc_thresholds}

    def mma_curve(self):
        if not self.pairs:
            return np.zeros(len(self.mma_thresholds))
        return np.mean([p.mma for p in self.pairs], axis=0)

    def coarse_precision(self):
        """Pooled over all coarse matches of all pairs."""
        total = sum(p.n_coarse for p in self.pairs)
        return sum(p.n_coarse_correct for p in self.pairs) / total if total else math.nan

    def topic_agreement(self):
        vals = [p.topic_agreement for p in self.pairs if not math.isnan(p.topic_agreement)]
        return float(np.mean(vals)) if vals else math.nan

    def summary_lines(self):
        lines = [f"pairs\t{len(self.pairs)}"]
        if not self.pairs:
            return lines
        for t, v in self.auc().items():
            lines.append(f"auc@{t}px\t{v:.6f}")
        for t, v in zip(self.mma_thresholds, self.mma_curve()):
            lines.append(f"mma@{t}px\t{v:.6f}")
        lines.append(f"mean_matches\t{np.mean([p.n_matches for p in self.pairs]):.3f}")
        lines.append(f"mean_inlier_ratio\t{np.mean([p.inlier_ratio for p in self.pairs]):.6f}")
        lines.append(f"coarse_precision\t{self.coarse_precision():.6f}")
        lines.append(f"topic_agreement\t{self.topic_agreement():.6f}")
        return lines

    def to_text(self):
        return "\n".join(self.summary_lines()) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["seed", "n_matches", "n_inliers", "inlier_ratio", "corner_error",
                         "n_coarse", "n_coarse_correct", "topic_agreement"]
                        + [f"mma@{t}" for t in self.mma_thresholds])
        for p in self.pairs:
            writer.writerow([p.seed, p.n_matches, p.n_inliers, f"{p.inlier_ratio:.6f}",
                             f"{p.corner_error:.6f}", p.n_coarse, p.n_coarse_correct,
                             f"{p.topic_agreement:.6f}"] + [f"{v:.6f}" for v in p.mma])
        return buf.getvalue()
