"""Topic bank, per-feature and per-image topic distributions, covisibility, sampling."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import AttentionLayer
from .numerics import ContractError, DimensionError, make_rng


class TopicBank(nn.Module):
    """K learnable topic embeddings refined against an image by cross-attention."""

    def __init__(self, n_topics, d, heads=4, n_layers=2, kernel="dot"):
        super().__init__()
        if n_topics < 1:
            raise ContractError("need at least one topic")
        self.embeddings = nn.Parameter(torch.randn(n_topics, d) * 0.5)
        self.layers = nn.ModuleList([AttentionLayer(d, heads, kernel) for _ in range(n_layers)])

    @property
    def n_topics(self):
        return self.embeddings.shape[0]

    def forward(self, feats, counter=None):
        return infer_local_topics(self, feats, counter)


def infer_local_topics(bank, feats, counter=None):
    """Image-specific topics: each global topic queries the n x d feature set."""
    if feats.dim() != 2 or feats.shape[0] < 1:
        raise DimensionError("features must be a non-empty n x d matrix")
    if feats.shape[1] != bank.embeddings.shape[1]:
        raise DimensionError("topic and feature widths differ")
    t = bank.embeddings.to(feats.dtype)
    for layer in bank.layers:
        t = layer(t, feats, counter)
    return t


def topic_distribution(local_topics, feats):
    """Row-stochastic n x K matrix: softmax over topics of <T_k, F_i> / sqrt(d)."""
    if local_topics.shape[1] != feats.shape[1]:
        raise DimensionError("topic and feature widths differ")
    logits = feats @ local_topics.T / feats.shape[1] ** 0.5
    return torch.softmax(logits, dim=-1)


def image_topic_distribution(theta):
    if theta.shape[0] < 1:
        raise DimensionError("no features to aggregate")
    agg = theta.sum(dim=0)
    return agg / agg.sum()


@dataclass
class CovisibleReport:
    probabilities: np.ndarray   # K
    selected: np.ndarray        # K_co topic ids, ascending by rank


def covisible_topics(theta_img_a, theta_img_b, n_covisible):
    a = np.asarray(torch.as_tensor(theta_img_a).detach().double().cpu(), dtype=np.float64)
    b = np.asarray(torch.as_tensor(theta_img_b).detach().double().cpu(), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("image topic vectors differ in length")
    if not 1 <= n_covisible <= a.shape[0]:
        raise ContractError(f"n_covisible={n_covisible} outside [1, {a.shape[0]}]")
    vis = a * b
    # stable sort on -vis keeps the lower id first among ties
    order = np.argsort(-vis, kind="stable")
    return CovisibleReport(vis, order[:n_covisible])


def pair_topic_distribution(theta_i, theta_j):
    """Distribution over {topic 0..K-1, NaN}; the last entry is the NaN event."""
    ti = torch.as_tensor(theta_i)
    tj = torch.as_tensor(theta_j)
    if ti.shape != tj.shape:
        raise DimensionError("topic rows differ in length")
    same = ti * tj
    nan = (1.0 - same.sum(dim=-1, keepdim=True)).clamp(0.0, 1.0)
    return torch.cat([same, nan], dim=-1)


def sample_assignments(theta, n_samples, seed, stream=()):
    """Draw n_samples i.i.d. topic labels per row of ``theta`` -> (S, n) int array.

    Labels are 0-based. Inverse-CDF sampling from one Philox stream, so the
    result depends only on (theta, seed, stream).
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    p = np.asarray(torch.as_tensor(theta).detach().double().cpu(), dtype=np.float64)
    cdf = np.cumsum(p, axis=1)
    cdf /= cdf[:, -1:]
    u = make_rng(seed, *stream).random((n_samples, p.shape[0]))
    labels = np.empty((n_samples, p.shape[0]), dtype=np.int64)
    for s in range(n_samples):
        labels[s] = (u[s][:, None] >= cdf).sum(axis=1)
    # floating round-off in the last cdf entry cannot push a label past K-1
    np.minimum(labels, p.shape[1] - 1, out=labels)
    return labels


def argmax_assignments(theta):
    # numpy argmax returns the first maximum, i.e. the lowest topic id on ties
    return np.asarray(torch.as_tensor(theta).detach().cpu()).argmax(axis=-1)
