import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from topicmatch.coarse import (TopicAugmenter, augment_features, dual_softmax, elbo,
                               elbo_per_match, masked_dual_softmax, select_coarse_matches,
                               select_from_matrix)
from topicmatch.numerics import ContractError, DimensionError, FlopCounter
from topicmatch.topics import sample_assignments

from elbo_oracle import ToyInstance
from selection_oracle import brute_force_select


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def augmenter(d=16, kernel="dot", seed=0):
    torch.manual_seed(seed)
    return TopicAugmenter(d, 4, kernel).double().eval()


class TestAugment:
    def test_single_feature_groups(self):
        aug = augmenter()
        groups, a, b = augment_features(randn(1, 16, seed=1), randn(1, 16, seed=2),
                                        [0], [0], [0], aug)
        assert len(groups) == 1 and torch.isfinite(a).all() and torch.isfinite(b).all()

    def test_permutation_within_group(self):
        aug = augmenter()
        fa, fb = randn(6, 16, seed=1), randn(5, 16, seed=2)
        perm_a, perm_b = np.array([3, 0, 5, 1, 4, 2]), np.array([4, 2, 0, 3, 1])
        with torch.no_grad():
            ga, gb = aug(fa, fb)
            pa, pb = aug(fa[perm_a], fb[perm_b])
        assert torch.allclose(pa, ga[perm_a], atol=1e-12)
        assert torch.allclose(pb, gb[perm_b], atol=1e-12)

    def test_groups_and_passthrough(self):
        aug = augmenter()
        fa, fb = randn(8, 16, seed=1), randn(8, 16, seed=2)
        la = np.array([0, 1, 2, 0, 1, 2, 3, 3])
        lb = np.array([1, 1, 0, 0, 2, 2, 2, 1])
        with torch.no_grad():
            groups, a, b = augment_features(fa, fb, la, lb, [0, 1, 3], aug)
            ref_a, ref_b = aug(fa[[0, 3]], fb[[2, 3]])
        # topic 3 is empty in B and topic 2 is not requested
        assert [g.topic for g in groups] == [0, 1]
        assert torch.allclose(a[[0, 3]], ref_a, atol=1e-12)
        assert torch.allclose(b[[2, 3]], ref_b, atol=1e-12)
        assert torch.equal(a[[2, 5, 6, 7]], fa[[2, 5, 6, 7]])
        assert torch.equal(b[[4, 5, 6]], fb[[4, 5, 6]])

    @pytest.mark.parametrize("kernel", ["dot", "linear"])
    def test_grouping_reduces_flops(self, kernel):
        n, k, d = 256, 8, 64
        aug = augmenter(d, kernel)
        fa, fb = randn(n, d, seed=1), randn(n, d, seed=2)
        labels = np.arange(n) % k
        grouped, full = FlopCounter(), FlopCounter()
        with torch.no_grad():
            augment_features(fa, fb, labels, labels, range(k), aug, grouped)
            aug(fa, fb, full)
        if kernel == "dot":
            assert grouped.total < full.total
        else:
            # linear attention costs are linear in n: a partition of all N cells costs the same
            assert grouped.total == full.total
            restricted = FlopCounter()
            with torch.no_grad():
                augment_features(fa, fb, labels, labels, range(k - 1), aug, restricted)
            assert restricted.total < full.total

    def test_label_shape_checked(self):
        with pytest.raises(DimensionError):
            augment_features(randn(3, 16), randn(3, 16), [0, 0], [0, 0, 0], [0], augmenter())

    def test_masked_equals_grouped(self):
        aug = augmenter(16, seed=4)
        fa, fb = randn(12, 16, seed=1), randn(10, 16, seed=2)
        g = np.random.default_rng(0)
        la, lb = g.integers(0, 4, (3, 12)), g.integers(0, 4, (3, 10))
        la[2] = 0      # topic present in A only for some labels
        with torch.no_grad():
            xa, xb = aug.forward_masked(fa, fb, la, lb)
            for s in range(3):
                _, ra, rb = augment_features(fa, fb, la[s], lb[s], range(4), aug)
                assert torch.allclose(xa[s], ra, atol=1e-12)
                assert torch.allclose(xb[s], rb, atol=1e-12)


class TestDualSoftmax:
    def test_single_entry(self):
        assert dual_softmax(randn(1, 4), randn(1, 4, seed=1)).item() == pytest.approx(1.0, abs=1e-15)

    def test_equal_scores(self):
        p = dual_softmax(torch.zeros(3, 4, dtype=torch.float64), randn(3, 4))
        assert torch.allclose(p, torch.full((3, 3), 1 / 9, dtype=torch.float64))

    def test_strong_diagonal(self):
        a = torch.eye(2, dtype=torch.float64) * 10 ** 0.5
        p = dual_softmax(a, a, temperature=1.0)
        assert (p.diagonal() > 0.99).all()

    def test_bounded_by_each_softmax(self):
        a, b = randn(5, 8, seed=1), randn(7, 8, seed=2)
        p = dual_softmax(a, b, 0.5)
        s = a @ b.T / 0.5
        assert (p >= 0).all() and (p <= 1).all()
        assert (p <= torch.minimum(s.softmax(1), s.softmax(0)) + 1e-15).all()

    def test_contract(self):
        with pytest.raises(ContractError):
            dual_softmax(randn(2, 3), randn(2, 3), 0.0)
        with pytest.raises(DimensionError):
            dual_softmax(randn(2, 3), randn(2, 4))
        with pytest.raises(DimensionError):
            dual_softmax(randn(0, 3), randn(2, 3))

    def test_masked_equals_restricted(self):
        a, b = randn(6, 8, seed=1), randn(5, 8, seed=2)
        ra, rb = [0, 2, 3], [1, 4]
        mask = torch.zeros(6, 5, dtype=torch.bool)
        mask[np.ix_(ra, rb)] = True
        p = masked_dual_softmax(a, b, mask, 0.3)
        ref = dual_softmax(a[ra], b[rb], 0.3)
        assert torch.allclose(p[np.ix_(ra, rb)], ref, atol=1e-14)
        assert (p[~mask] == 0).all()


class TestElbo:
    def test_constant_half(self):
        lp = torch.full((1, 6), np.log(0.5), dtype=torch.float64)
        assert elbo(lp, np.ones((1, 6), bool)).item() == pytest.approx(np.log(0.5), abs=1e-15)

    def test_invalid_samples_ignored(self):
        lp = torch.tensor([[-1.0, -100.0, -3.0], [-5.0, -5.0, -5.0]], dtype=torch.float64)
        valid = np.array([[True, False, True], [False, False, False]])
        assert torch.allclose(elbo_per_match(lp, valid), torch.tensor([-2.0, 0.0], dtype=torch.float64))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            elbo(torch.zeros(2, 3), np.ones((2, 2), bool))

    def test_enumeration_oracle(self):
        toy = ToyInstance()
        exact, loglik = toy.exact()
        assert loglik - exact > 0.01     # the bound is not tight on this instance
        la = sample_assignments(toy.theta_a, 10 ** 4, 7, (1,))
        lb = sample_assignments(toy.theta_b, 10 ** 4, 7, (2,))
        lp, valid = toy.sampled(la, lb)
        est = elbo(torch.as_tensor(lp), valid).item()
        assert abs(est - exact) < 0.01
        se = np.sqrt(sum(lp[m][valid[m]].var() / valid[m].sum() for m in range(len(lp))))
        assert est <= loglik + 3 * se

    def test_seed_average_unbiased_in_s(self):
        toy = ToyInstance()
        exact, _ = toy.exact()
        for s in (50, 100):
            est = []
            for seed in range(100):
                la = sample_assignments(toy.theta_a, s, seed, (1,))
                lb = sample_assignments(toy.theta_b, s, seed, (2,))
                lp, valid = toy.sampled(la, lb)
                est.append(elbo(torch.as_tensor(lp), valid).item())
            assert abs(np.mean(est) - exact) < 0.02


class TestSelect:
    def test_diagonal(self):
        i, j, p = select_from_matrix([[0.9, 0.01], [0.01, 0.9]], 0.2)
        assert set(zip(i, j, p)) == {(0, 0, 0.9), (1, 1, 0.9)}

    def test_below_threshold(self):
        assert len(select_from_matrix([[0.15]], 0.2)[0]) == 0

    def test_without_mnn(self):
        prob = np.array([[0.5, 0.4], [0.45, 0.1]])
        assert len(select_from_matrix(prob, 0.3, mutual_nn=True)[0]) == 1
        assert len(select_from_matrix(prob, 0.3, mutual_nn=False)[0]) == 3

    def test_tau_contract(self):
        for tau in (0.0, 1.0, -0.1):
            with pytest.raises(ContractError):
                select_from_matrix([[0.5]], tau)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1),
           st.floats(0.01, 0.99))
    def test_random_4x4_oracle(self, m, n, seed, tau):
        prob = np.random.default_rng(seed).random((m, n))
        prob[prob < 0.3] = 0.3     # force ties now and then
        i, j, p = select_from_matrix(prob, tau)
        assert set(zip(i.tolist(), j.tolist(), p.tolist())) == brute_force_select(prob, tau)

    def test_merge_maps_indices_and_keeps_best_duplicate(self):
        g1 = (np.array([[0.9, 0.0], [0.0, 0.8]]), [3, 7], [2, 5], 0)
        g2 = (np.array([[0.95]]), [3], [2], 1)
        g3 = (np.array([[0.5]]), [7], [5], 2)
        out = select_coarse_matches([g1, g2, g3], 0.2)
        assert out.as_tuples() == [(3, 2, 0.95), (7, 5, 0.8)]
        assert list(out.topic) == [1, 0]

    def test_partial_injection(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            out = select_coarse_matches([(rng.random((6, 6)), range(6), range(6), 0)], 0.1)
            assert len(set(out.i)) == len(out) and len(set(out.j)) == len(out)
            assert (out.confidence >= 0.1).all()

    def test_empty(self):
        assert len(select_coarse_matches([], 0.2)) == 0
