"""Topic-map overlays: each coarse cell tinted by its argmax topic."""
import numpy as np
import torch

from .synth import COARSE_CELL
from .topics import argmax_assignments

PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (67, 99, 216),
    (245, 130, 49), (145, 30, 180), (66, 212, 244), (240, 50, 230),
    (191, 239, 69), (250, 190, 212), (70, 153, 144), (220, 190, 255),
    (154, 99, 36), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.float64) / 255.0


def topic_color(k):
    return PALETTE[int(k) % len(PALETTE)]


def topic_overlay(image, labels, grid_hw, tinted=None, alpha=0.45):
    """RGB uint8 overlay of an H x W grayscale image in [0, 1].

    ``labels`` holds one topic per coarse cell (row-major over ``grid_hw``). Cells
    are upsampled by nearest neighbour and alpha-blended; when ``tinted`` is given
    only those topics are coloured and the rest stay gray.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    gh, gw = grid_hw
    labels = np.asarray(labels, dtype=np.int64).reshape(gh, gw)
    cells = np.repeat(np.repeat(labels, COARSE_CELL, axis=0), COARSE_CELL, axis=1)[:h, :w]
    colors = PALETTE[cells % len(PALETTE)]
    gray = np.repeat(image[:, :, None], 3, axis=2)
    mask = np.ones((h, w), dtype=bool) if tinted is None else np.isin(cells, np.asarray(tinted))
    out = np.where(mask[:, :, None], (1 - alpha) * gray + alpha * colors, gray)
    return np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)


def single_image_overlay(model, image, alpha=0.45):
    model.eval()
    with torch.no_grad():
        enc = model.encode([image])[0]
    labels = argmax_assignments(enc.theta.numpy())
    return topic_overlay(image, labels, enc.grid_hw, None, alpha)


def pair_overlays(model, image_a, image_b, n_covisible=None, alpha=0.45):
    """Overlays for both images with only the covisible topics tinted."""
    res = model.match(image_a, image_b, n_covisible=n_covisible)
    keep = res.covisible.selected
    return (topic_overlay(image_a, res.labels_a, res.grid_a, keep, alpha),
            topic_overlay(image_b, res.labels_b, res.grid_b, keep, alpha), res)
