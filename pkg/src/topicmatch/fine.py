"""Sub-pixel refinement of coarse matches inside fine-level patches."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import AttentionLayer
from .numerics import ContractError, DimensionError

COARSE_TO_FINE = 4   # 1/8 -> 1/2 scale
FINE_STRIDE = 2      # fine grid -> image pixels


@dataclass
class RefinedMatches:
    points_a: np.ndarray      # M x 2 image (x, y)
    points_b: np.ndarray      # M x 2 image (x, y)
    confidence: np.ndarray
    variance: np.ndarray      # total heatmap variance, fine pixels^2
    topic: np.ndarray
    dropped: int = 0

    def __len__(self):
        return len(self.points_a)


def coarse_to_fine_center(cells, coarse_w):
    """Flat coarse cell indices -> integer fine-grid (x, y) of the upscaled cell centre."""
    cells = np.asarray(cells, dtype=np.int64)
    cy, cx = np.divmod(cells, coarse_w)
    return np.stack([cx * COARSE_TO_FINE + COARSE_TO_FINE // 2,
                     cy * COARSE_TO_FINE + COARSE_TO_FINE // 2], axis=-1)


def fine_to_image(xy):
    return np.asarray(xy, dtype=np.float64) * FINE_STRIDE + 0.5 * (FINE_STRIDE - 1)


def image_to_fine(xy):
    return (np.asarray(xy, dtype=np.float64) - 0.5 * (FINE_STRIDE - 1)) / FINE_STRIDE


def patch_offsets(patch_size):
    r = patch_size // 2
    ys, xs = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=-1)   # row-major (x, y)


def crop_patches(fine_map, centers, patch_size):
    """Gather patch_size^2 feature windows around integer fine (x, y) centres.

    ``fine_map`` is H x W x d. Centres closer than patch_size // 2 to the border
    are dropped. Returns (patches M' x P^2 x d, keep mask over the input centres).
    """
    if patch_size % 2 == 0:
        raise ContractError("patch size must be odd")
    if fine_map.dim() != 3:
        raise DimensionError("fine map must be H x W x d")
    h, w = fine_map.shape[:2]
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    r = patch_size // 2
    keep = ((centers[:, 0] >= r) & (centers[:, 0] < w - r)
            & (centers[:, 1] >= r) & (centers[:, 1] < h - r))
    kept = centers[keep]
    offs = patch_offsets(patch_size)
    xs = torch.from_numpy(kept[:, None, 0] + offs[None, :, 0])
    ys = torch.from_numpy(kept[:, None, 1] + offs[None, :, 1])
    return fine_map[ys, xs], keep


class FineRefiner(nn.Module):
    """A single cross-attention layer shared by both patches of a pair."""

    def __init__(self, d, heads=4, kernel="dot"):
        super().__init__()
        self.cross_attn = AttentionLayer(d, heads, kernel)

    def forward(self, patch_a, patch_b, counter=None):
        a = self.cross_attn(patch_a, patch_b, counter)
        b = self.cross_attn(patch_b, patch_a, counter)
        return a, b


def heatmap_statistics(heatmap, patch_size, hard_argmax=False):
    """Expected (x, y) offset and total variance of a heatmap over the patch grid."""
    grid = torch.as_tensor(patch_offsets(patch_size), dtype=heatmap.dtype)
    mean = heatmap @ grid
    second = heatmap @ (grid ** 2)
    variance = (second - mean ** 2).clamp(min=0).sum(dim=-1)
    if hard_argmax:
        mean = grid[heatmap.argmax(dim=-1)]
    return mean, variance


def refine(patch_a, patch_b, refiner=None, hard_argmax=False, counter=None):
    """Offset (fine pixels, x/y) of the best match of A's centre inside B's patch.

    Patches are M x P^2 x d. Returns (offset M x 2, total variance M).
    """
    if patch_a.shape != patch_b.shape:
        raise DimensionError("patch shapes differ")
    n = patch_a.shape[-2]
    patch_size = int(round(n ** 0.5))
    if patch_size * patch_size != n:
        raise DimensionError("patches must be square")
    if refiner is not None:
        patch_a, patch_b = refiner(patch_a, patch_b, counter)
    center = patch_a[..., n // 2, :]
    d = patch_a.shape[-1]
    sim = (patch_b @ center.unsqueeze(-1)).squeeze(-1) / d ** 0.5
    heat = torch.softmax(sim, dim=-1)
    return heatmap_statistics(heat, patch_size, hard_argmax)
