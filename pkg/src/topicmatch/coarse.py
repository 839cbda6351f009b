"""Topic-restricted feature augmentation and dual-softmax coarse matching."""
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .layers import AttentionLayer
from .numerics import ContractError, DimensionError


@dataclass
class TopicGroup:
    topic: int
    idx_a: np.ndarray
    idx_b: np.ndarray
    feats_a: torch.Tensor
    feats_b: torch.Tensor


@dataclass
class CoarseMatchSet:
    i: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    j: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    topic: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    coherence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.i)

    def as_tuples(self):
        return [(int(a), int(b), float(c)) for a, b, c in zip(self.i, self.j, self.confidence)]


class TopicAugmenter(nn.Module):
    """One self-attention and one cross-attention layer shared by every topic group."""

    def __init__(self, d, heads=4, kernel="dot"):
        super().__init__()
        self.self_attn = AttentionLayer(d, heads, kernel)
        self.cross_attn = AttentionLayer(d, heads, kernel)

    def forward(self, fa, fb, counter=None, kernel=None):
        fa = self.self_attn(fa, fa, counter, kernel)
        fb = self.self_attn(fb, fb, counter, kernel)
        fa2 = self.cross_attn(fa, fb, counter, kernel)
        fb2 = self.cross_attn(fb, fa, counter, kernel)
        return fa2, fb2

    def forward_masked(self, fa, fb, labels_a, labels_b):
        """All topic groups of S label samples at once via same-topic attention masks.

        ``labels_a`` is S x n_a, ``labels_b`` S x n_b. Returns S x n x d feature
        stacks equal to running :func:`augment_features` once per sample over
        every topic present in both images; other rows are passed through.
        """
        la = torch.as_tensor(np.asarray(labels_a))
        lb = torch.as_tensor(np.asarray(labels_b))
        same_ab = la[:, :, None] == lb[:, None, :]
        active_a = same_ab.any(dim=2, keepdim=True)
        active_b = same_ab.any(dim=1).unsqueeze(-1)
        xa = fa.expand(la.shape[0], *fa.shape)
        xb = fb.expand(lb.shape[0], *fb.shape)
        ya = self.self_attn(xa, xa, kernel="dot", mask=la[:, :, None] == la[:, None, :])
        yb = self.self_attn(xb, xb, kernel="dot", mask=lb[:, :, None] == lb[:, None, :])
        za = self.cross_attn(ya, yb, kernel="dot", mask=same_ab)
        zb = self.cross_attn(yb, ya, kernel="dot", mask=same_ab.transpose(1, 2))
        return torch.where(active_a, za, xa), torch.where(active_b, zb, xb)


def augment_features(feats_a, feats_b, labels_a, labels_b, topic_ids, augmenter,
                     counter=None, kernel=None):
    """Augment each topic group with the shared SA/CA block.

    Returns ``(groups, aug_a, aug_b)``: one TopicGroup per topic non-empty in both
    images (in ``topic_ids`` order) and full-size feature matrices in which rows
    outside those groups are passed through unchanged.
    """
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != (feats_a.shape[0],) or labels_b.shape != (feats_b.shape[0],):
        raise DimensionError("one topic label per feature required")
    groups = []
    rows_a, rows_b, upd_a, upd_b = [], [], [], []
    for k in topic_ids:
        ia = np.flatnonzero(labels_a == k)
        ib = np.flatnonzero(labels_b == k)
        if len(ia) == 0 or len(ib) == 0:
            continue
        ga, gb = augmenter(feats_a[torch.from_numpy(ia)], feats_b[torch.from_numpy(ib)],
                           counter, kernel)
        groups.append(TopicGroup(int(k), ia, ib, ga, gb))
        rows_a.append(ia)
        rows_b.append(ib)
        upd_a.append(ga)
        upd_b.append(gb)
    aug_a, aug_b = feats_a, feats_b
    if groups:
        aug_a = feats_a.index_copy(0, torch.from_numpy(np.concatenate(rows_a)), torch.cat(upd_a))
        aug_b = feats_b.index_copy(0, torch.from_numpy(np.concatenate(rows_b)), torch.cat(upd_b))
    return groups, aug_a, aug_b


def dual_softmax(feats_a, feats_b, temperature=0.1):
    """softmax_rows(S) * softmax_cols(S) for S = <a_i, b_j> / temperature."""
    if feats_a.shape[0] < 1 or feats_b.shape[0] < 1:
        raise DimensionError("dual softmax needs non-empty inputs")
    if feats_a.shape[1] != feats_b.shape[1]:
        raise DimensionError("feature widths differ")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    scores = feats_a @ feats_b.T / temperature
    return torch.softmax(scores, dim=1) * torch.softmax(scores, dim=0)


def masked_dual_softmax(feats_a, feats_b, mask, temperature=0.1):
    """Dual softmax restricted to allowed (i, j) pairs; disallowed entries are 0."""
    scores = feats_a @ feats_b.transpose(-1, -2) / temperature
    neg = scores.masked_fill(~mask, float("-inf"))
    row_ok = mask.any(dim=-1, keepdim=True)
    col_ok = mask.any(dim=-2, keepdim=True)
    rows = torch.softmax(neg.masked_fill(~row_ok, 0.0), dim=-1)
    cols = torch.softmax(neg.masked_fill(~col_ok, 0.0), dim=-2)
    return rows * cols * mask


def group_match_probability(group, temperature):
    d = group.feats_a.shape[1]
    return dual_softmax(group.feats_a / d ** 0.5, group.feats_b / d ** 0.5, temperature)


def elbo_per_match(log_probs, valid):
    """Mean log-probability over the valid samples of each match (M x S -> M).

    A match whose samples were all NaN-paired (different topics) gets zero.
    """
    log_probs = torch.as_tensor(log_probs)
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if log_probs.shape != valid.shape:
        raise DimensionError("log_probs and valid masks differ in shape")
    count = valid.sum(dim=1)
    masked = torch.where(valid, log_probs, torch.zeros_like(log_probs))
    return masked.sum(dim=1) / count.clamp(min=1).to(log_probs.dtype)


def elbo(log_probs, valid):
    """Monte-Carlo ELBO summed over matches."""
    return elbo_per_match(log_probs, valid).sum()


def _mutual_nn_mask(prob):
    row_best = prob.argmax(axis=1)
    col_best = prob.argmax(axis=0)
    mask = np.zeros(prob.shape, dtype=bool)
    rows = np.arange(prob.shape[0])
    mask[rows, row_best] = col_best[row_best] == rows
    return mask


def select_from_matrix(prob, tau, mutual_nn=True):
    """(i, j, p) triples of one probability matrix, local indices, row-major order."""
    prob = np.asarray(prob, dtype=np.float64)
    if not 0.0 < tau < 1.0:
        raise ContractError("tau must lie in (0, 1)")
    keep = prob >= tau
    if mutual_nn:
        keep &= _mutual_nn_mask(prob)
    ii, jj = np.nonzero(keep)
    return ii, jj, prob[ii, jj]


def select_coarse_matches(groups, tau, mutual_nn=True):
    """Merge per-topic selections into one CoarseMatchSet on the full grids.

    ``groups`` is an iterable of (prob matrix, idx_a, idx_b, topic id). When the
    same (i, j) appears in several groups the most confident instance is kept.
    """
    best = {}
    for prob, idx_a, idx_b, topic in groups:
        ii, jj, pp = select_from_matrix(prob, tau, mutual_nn)
        for a, b, p in zip(np.asarray(idx_a)[ii], np.asarray(idx_b)[jj], pp):
            key = (int(a), int(b))
            if key not in best or p > best[key][0]:
                best[key] = (float(p), int(topic))
    if not best:
        return CoarseMatchSet()
    keys = sorted(best)
    return CoarseMatchSet(
        i=np.array([k[0] for k in keys], dtype=np.int64),
        j=np.array([k[1] for k in keys], dtype=np.int64),
        confidence=np.array([best[k][0] for k in keys]),
        topic=np.array([best[k][1] for k in keys], dtype=np.int64),
        coherence=np.zeros(len(keys)),
    )
