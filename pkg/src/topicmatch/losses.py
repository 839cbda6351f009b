"""Coarse positive/negative topic losses and the variance-weighted fine loss."""
import numpy as np
import torch

from .numerics import ContractError, DimensionError

LOG_EPS = 1e-9
VARIANCE_FLOOR = 1e-6


def _rows(theta, idx):
    return theta[torch.as_tensor(np.asarray(idx), dtype=torch.long)]


def topic_coherence(theta_a, theta_b, idx_a, idx_b):
    """sum_k theta^A_{i,k} theta^B_{j,k} for each (i, j); idx_b may be M x N."""
    ta = _rows(theta_a, idx_a)
    tb = _rows(theta_b, idx_b)
    if tb.dim() == 3:
        ta = ta.unsqueeze(1)
    return (ta * tb).sum(dim=-1)


def coarse_pos_loss(idx_a, idx_b, elbo_terms, theta_a, theta_b, eps=LOG_EPS):
    """-sum over GT matches of (per-match ELBO + log sum_k theta^A theta^B)."""
    if len(idx_a) == 0:
        raise ContractError("positive loss needs at least one GT match")
    if elbo_terms.shape != (len(idx_a),):
        raise DimensionError("one ELBO term per GT match required")
    coh = topic_coherence(theta_a, theta_b, idx_a, idx_b)
    return -(elbo_terms + torch.log(coh.clamp(min=eps))).sum()


def coarse_neg_loss(idx_a, negatives, theta_a, theta_b, eps=LOG_EPS):
    """-sum over GT matches of mean_n log(1 - sum_k theta^A_i theta^B_n)."""
    negatives = np.asarray(negatives)
    if negatives.ndim != 2 or negatives.shape[0] != len(idx_a) or negatives.shape[1] < 1:
        raise DimensionError("negatives must be M x N with N >= 1")
    coh = topic_coherence(theta_a, theta_b, idx_a, negatives)
    return -torch.log((1.0 - coh).clamp(min=eps)).mean(dim=1).sum()


def fine_loss(offsets, gt_offsets, variance, floor=VARIANCE_FLOOR):
    """Mean of ||offset - gt||^2 / variance; no gradient reaches the variance."""
    if offsets.shape[0] < 1:
        raise ContractError("fine loss needs at least one refined match")
    if offsets.shape != gt_offsets.shape or variance.shape != offsets.shape[:1]:
        raise DimensionError("offset, target and variance shapes disagree")
    weight = 1.0 / variance.detach().clamp(min=floor)
    return (weight * ((offsets - gt_offsets) ** 2).sum(dim=-1)).mean()


def total_loss(pos, neg, fine):
    return pos + neg + fine


def sample_negatives(idx_b, grid_hw, n_negatives, rng):
    """Uniformly draw B cells per GT match, excluding the GT cell's 3x3 neighbourhood."""
    gh, gw = grid_hw
    idx_b = np.asarray(idx_b, dtype=np.int64)
    out = np.empty((len(idx_b), n_negatives), dtype=np.int64)
    all_cells = np.arange(gh * gw)
    ay, ax = np.divmod(all_cells, gw)
    for m, j in enumerate(idx_b):
        jy, jx = divmod(int(j), gw)
        pool = all_cells[(np.abs(ay - jy) > 1) | (np.abs(ax - jx) > 1)]
        if len(pool) == 0:
            raise ContractError("grid too small to draw negatives")
        out[m] = rng.choice(pool, size=n_negatives, replace=len(pool) < n_negatives)
    return out
