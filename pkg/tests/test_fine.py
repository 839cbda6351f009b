import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from topicmatch.fine import (FineRefiner, coarse_to_fine_center, crop_patches, fine_to_image,
                             heatmap_statistics, image_to_fine, patch_offsets, refine)
from topicmatch.numerics import ContractError, DimensionError


def fine_map(h=32, w=32, d=8, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(h, w, d, generator=g, dtype=torch.float64) * scale


def identity_refiner(d):
    r = FineRefiner(d, heads=2).double()
    with torch.no_grad():
        r.cross_attn.norm2.weight.zero_()
        r.cross_attn.norm2.bias.zero_()
    return r


class TestConventions:
    def test_cell_centre(self):
        assert coarse_to_fine_center([0, 17], 16).tolist() == [[2, 2], [6, 6]]

    def test_fine_image_roundtrip(self):
        xy = np.array([[0.0, 0.0], [2.5, 7.25]])
        assert np.allclose(fine_to_image(xy), [[0.5, 0.5], [5.5, 15.0]])
        assert np.allclose(image_to_fine(fine_to_image(xy)), xy)

    def test_coarse_centre_inside_its_cell(self):
        # cell c spans image pixels 8c..8c+7; the integer fine centre 4c+2 sits at 8c+4.5
        assert np.allclose(fine_to_image(coarse_to_fine_center([5], 16)), [[44.5, 4.5]])

    def test_offsets_row_major(self):
        offs = patch_offsets(3)
        assert offs[0].tolist() == [-1, -1] and offs[1].tolist() == [0, -1] and offs[4].tolist() == [0, 0]


class TestCrop:
    def test_rows_8_to_12(self):
        fm = fine_map()
        patches, keep = crop_patches(fm, [[10, 10]], 5)
        assert keep.tolist() == [True]
        assert torch.equal(patches[0].reshape(5, 5, -1), fm[8:13, 8:13])

    def test_border_dropped(self):
        _, keep = crop_patches(fine_map(), [[1, 1], [10, 10], [29, 29], [30, 10]], 5)
        assert keep.tolist() == [False, True, True, False]

    def test_identical_images_identical_patches(self):
        fm = fine_map(seed=3)
        centers = coarse_to_fine_center(np.arange(64), 8)
        pa, ka = crop_patches(fm, centers, 5)
        pb, kb = crop_patches(fm.clone(), centers, 5)
        assert np.array_equal(ka, kb) and torch.equal(pa, pb)

    def test_contract(self):
        with pytest.raises(ContractError):
            crop_patches(fine_map(), [[10, 10]], 4)
        with pytest.raises(DimensionError):
            crop_patches(torch.zeros(32, 32), [[10, 10]], 5)


class TestRefine:
    def test_one_hot_match_at_centre(self):
        d = 25
        pa = torch.zeros(1, 25, d, dtype=torch.float64)
        pa[0, 12, 12] = 200.0
        pb = torch.eye(25, dtype=torch.float64).unsqueeze(0) * 200.0
        off, var = refine(pa, pb)
        assert off.abs().max() < 1e-12 and var.item() < 1e-12

    def test_uniform_heatmap(self):
        off, var = refine(torch.zeros(1, 25, 4, dtype=torch.float64), torch.zeros(1, 25, 4, dtype=torch.float64))
        assert off.abs().max() < 1e-15
        assert var.item() == pytest.approx(4.0, abs=1e-12)

    def test_corner_limit(self):
        # score grows with x + y, so mass moves to the (+2, +2) corner as the scale grows
        offs = patch_offsets(5)
        pb = torch.as_tensor((offs.sum(1))[:, None] * 1.0).unsqueeze(0)
        pa = torch.ones(1, 25, 1, dtype=torch.float64)
        errs = []
        for scale in (1.0, 4.0, 16.0, 64.0):
            off, _ = refine(pa * scale, pb)
            errs.append((off - torch.tensor([2.0, 2.0], dtype=torch.float64)).abs().max().item())
        assert all(a > b for a, b in zip(errs, errs[1:])) and errs[-1] < 1e-6

    def test_identical_patches_identity_attention(self):
        fm = fine_map(d=32, scale=10.0)
        centers = coarse_to_fine_center(np.arange(36), 6)
        p, _ = crop_patches(fm, centers, 5)
        off, _ = refine(p, p.clone(), identity_refiner(32))
        assert off.abs().max() < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([3, 5, 7]), st.floats(0.1, 50.0))
    def test_offsets_inside_patch(self, seed, p, scale):
        g = torch.Generator().manual_seed(seed)
        pa = torch.randn(4, p * p, 6, generator=g, dtype=torch.float64) * scale
        pb = torch.randn(4, p * p, 6, generator=g, dtype=torch.float64) * scale
        off, var = refine(pa, pb)
        assert (off.abs() <= p // 2 + 1e-12).all() and (var >= 0).all()

    def test_variance_zero_iff_one_hot(self):
        one_hot = torch.zeros(1, 25, dtype=torch.float64)
        one_hot[0, 7] = 1.0
        _, v0 = heatmap_statistics(one_hot, 5)
        spread = one_hot * 0.999
        spread[0, 8] = 0.001
        _, v1 = heatmap_statistics(spread, 5)
        assert v0.item() < 1e-9 and v1.item() > 1e-9

    def test_hard_argmax(self):
        heat = torch.zeros(1, 25, dtype=torch.float64)
        heat[0, 3], heat[0, 20] = 0.6, 0.4
        off, _ = heatmap_statistics(heat, 5, hard_argmax=True)
        assert off.tolist() == [[1.0, -2.0]]

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            refine(torch.zeros(1, 25, 4), torch.zeros(1, 24, 4))
        with pytest.raises(DimensionError):
            refine(torch.zeros(1, 24, 4), torch.zeros(1, 24, 4))
