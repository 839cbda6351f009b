"""Matching + RANSAC + AUC/MMA over synthetic pairs, and match-table formatting."""
import math

import numpy as np

from .geometry import (DegenerateConfigurationError, EvalReport, InsufficientDataError,
                       PairResult, corner_error, mma, ransac_homography, warp_point)
from .synth import cell_centers, gen_pair, point_to_cell


def sorted_match_rows(result, topk=None):
    """Refined matches as rows (x1, y1, x2, y2, confidence, topic).

    Sorted by descending confidence, ties broken by (x1, y1); truncated to topk.
    """
    r = result.refined
    if len(r) == 0:
        return np.zeros((0, 6))
    rows = np.column_stack([r.points_a, r.points_b, r.confidence, r.topic.astype(np.float64)])
    order = np.lexsort((rows[:, 1], rows[:, 0], -rows[:, 4]))
    rows = rows[order]
    return rows[:topk] if topk else rows


def format_match_rows(rows):
    return "".join(f"{x1:.4f}\t{y1:.4f}\t{x2:.4f}\t{y2:.4f}\t{c:.6f}\t{int(t)}\n"
                   for x1, y1, x2, y2, c, t in rows)


def summary_line(result, rows):
    cov = ",".join(str(int(k)) for k in result.covisible.selected)
    return (f"# matches={len(rows)} coarse={len(result.coarse)} "
            f"dropped={result.refined.dropped} covisible={cov}\n")


def coarse_precision(coarse, homography, grid_a, grid_b):
    """Fraction of coarse matches whose B cell is within one cell (L-inf) of the GT cell."""
    if len(coarse) == 0:
        return math.nan
    p = warp_point(homography, cell_centers(grid_a)[coarse.i])
    gx, gy, _ = point_to_cell(p, grid_b)
    jy, jx = np.divmod(coarse.j, grid_b[1])
    return float(((np.abs(gx - jx) <= 1) & (np.abs(gy - jy) <= 1)).mean())


def topic_agreement(labels_a, labels_b, homography, grid_a, grid_b, tinted=None):
    """Fraction of A cells whose argmax topic equals that of the B cell they warp into."""
    p = warp_point(homography, cell_centers(grid_a))
    jx, jy, ok = point_to_cell(p, grid_b)
    if tinted is not None:
        ok &= np.isin(labels_a, tinted)
    if not ok.any():
        return math.nan
    return float((labels_a[ok] == labels_b[(jy * grid_b[1] + jx)[ok]]).mean())


def evaluate_pair(model, pair, cfg, tau=None, n_covisible=None, kernel=None, topk=None):
    result = model.match(pair.image_a, pair.image_b, tau, n_covisible, kernel)
    rows = sorted_match_rows(result, topk or cfg.topk)
    pa, pb = rows[:, :2], rows[:, 2:4]
    hw = pair.image_a.shape
    n_inliers, err = 0, math.inf
    if len(rows) >= 4:
        try:
            h_est, inliers = ransac_homography(pa, pb, cfg.ransac_threshold, cfg.ransac_confidence,
                                               seed=pair.seed, max_iters=cfg.ransac_max_iters)
            n_inliers = int(inliers.sum())
            err = corner_error(h_est, pair.homography, hw)
        except (DegenerateConfigurationError, InsufficientDataError, np.linalg.LinAlgError):
            pass
    n_correct = 0
    if len(result.coarse):
        prec = coarse_precision(result.coarse, pair.homography, result.grid_a, result.grid_b)
        n_correct = int(round(prec * len(result.coarse)))
    agree = topic_agreement(result.labels_a, result.labels_b, pair.homography,
                            result.grid_a, result.grid_b)
    return PairResult(pair.seed, len(rows), n_inliers, err, mma(pa, pb, pair.homography),
                      len(result.coarse), n_correct, agree)


def evaluate_seeds(model, seeds, cfg, **kw):
    report = EvalReport()
    for seed in seeds:
        pair = gen_pair(seed, cfg.image_size, cfg.eval_perspective, cfg.jitter)
        report.pairs.append(evaluate_pair(model, pair, cfg, **kw))
    return report
