"""End-to-end coarse-to-fine matcher: backbone, topics, grouped augmentation, refinement."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import losses
from .backbone import UNetBackbone, extract_features, positional_encoding
from .coarse import (CoarseMatchSet, TopicAugmenter, augment_features,
                     group_match_probability, elbo_per_match, masked_dual_softmax,
                     select_coarse_matches)
from .config import RunConfig
from .fine import (FineRefiner, RefinedMatches, coarse_to_fine_center, crop_patches,
                   fine_to_image, image_to_fine, refine)
from .geometry import warp_point
from .numerics import make_rng
from .synth import gt_coarse_matches
from .topics import (CovisibleReport, TopicBank, argmax_assignments, covisible_topics,
                     image_topic_distribution, infer_local_topics, sample_assignments,
                     topic_distribution)


@dataclass
class ImageEncoding:
    coarse: torch.Tensor        # n x d_c, row-major over the coarse grid
    fine: torch.Tensor          # H/2 x W/2 x d_f
    grid_hw: tuple
    image_hw: tuple
    theta: torch.Tensor = None  # n x K


@dataclass
class MatchResult:
    coarse: CoarseMatchSet
    refined: RefinedMatches
    covisible: CovisibleReport
    labels_a: np.ndarray
    labels_b: np.ndarray
    grid_a: tuple
    grid_b: tuple
    theta_img_a: np.ndarray
    theta_img_b: np.ndarray


class TopicMatcher(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        cfg = config or RunConfig()
        self.config = cfg
        self.backbone = UNetBackbone(cfg.widths)
        self.topics = TopicBank(cfg.n_topics, cfg.d_coarse, cfg.coarse_heads,
                                cfg.topic_layers, cfg.kernel_topic)
        self.augmenter = TopicAugmenter(cfg.d_coarse, cfg.coarse_heads, cfg.kernel_coarse)
        self.refiner = FineRefiner(cfg.d_fine, cfg.fine_heads, cfg.kernel_fine)

    @property
    def dtype(self):
        return self.topics.embeddings.dtype

    # ---- encoding ---------------------------------------------------------

    def encode(self, images, counter=None):
        """Features and topic distributions for a list of H x W images."""
        batch = torch.stack([torch.as_tensor(np.asarray(im), dtype=self.dtype) for im in images])
        pyr = extract_features(batch.unsqueeze(1), self.backbone)
        _, d, gh, gw = pyr.coarse.shape
        coarse = pyr.coarse.permute(0, 2, 3, 1).reshape(len(images), gh * gw, d)
        if self.config.use_pos_encoding:
            coarse = coarse + positional_encoding(gh, gw, d, self.dtype).reshape(1, gh * gw, d)
        fine = pyr.fine.permute(0, 2, 3, 1)
        out = []
        for b in range(len(images)):
            local = infer_local_topics(self.topics, coarse[b], counter)
            theta = topic_distribution(local, coarse[b])
            out.append(ImageEncoding(coarse[b], fine[b], (gh, gw), pyr.image_hw, theta))
        return out

    # ---- training -----------------------------------------------------------

    def pair_losses(self, enc_a, enc_b, homography, seed, stream):
        """Coarse positive/negative and fine losses of one pair (per-match normalized)."""
        cfg = self.config
        rng = make_rng(seed, *stream, 0)
        gi, gj = gt_coarse_matches(homography, enc_a.grid_hw, enc_b.grid_hw)
        if len(gi) == 0:
            return None
        m = len(gi)
        la = sample_assignments(enc_a.theta, cfg.n_samples, seed, (*stream, 1))
        lb = sample_assignments(enc_b.theta, cfg.n_samples, seed, (*stream, 2))
        if cfg.kernel_coarse == "dot":
            log_p, valid = self._sampled_log_probs_masked(enc_a, enc_b, la, lb, gi, gj)
        else:
            log_p, valid = self._sampled_log_probs_grouped(enc_a, enc_b, la, lb, gi, gj)
        elbo_terms = elbo_per_match(log_p, valid)
        negatives = losses.sample_negatives(gj, enc_b.grid_hw, cfg.n_negatives, rng)
        pos = losses.coarse_pos_loss(gi, gj, elbo_terms, enc_a.theta, enc_b.theta, cfg.log_eps)
        neg = losses.coarse_neg_loss(gi, negatives, enc_a.theta, enc_b.theta, cfg.log_eps)

        fine = self._fine_training_loss(enc_a, enc_b, gi, gj, homography, rng)
        return {"coarse_pos": pos / m, "coarse_neg": neg / m, "fine": fine,
                "n_gt": m, "valid_fraction": float(valid.mean())}

    def _sampled_log_probs_grouped(self, enc_a, enc_b, la, lb, gi, gj):
        """log P(m_ij | z^(s)) for GT matches, one explicit topic group at a time."""
        cfg = self.config
        m = len(gi)
        columns = []
        valid = np.zeros((m, len(la)), dtype=bool)
        for s in range(len(la)):
            za, zb = la[s][gi], lb[s][gj]
            groups, _, _ = augment_features(enc_a.coarse, enc_b.coarse, la[s], lb[s],
                                            np.intersect1d(la[s], lb[s]), self.augmenter)
            rows, vals = [], []
            for g in groups:
                sel = np.flatnonzero((za == g.topic) & (zb == g.topic))
                if len(sel) == 0:
                    continue
                pos_a = np.searchsorted(g.idx_a, gi[sel])
                pos_b = np.searchsorted(g.idx_b, gj[sel])
                prob = group_match_probability(g, cfg.ds_temperature)
                rows.append(sel)
                vals.append(prob[torch.from_numpy(pos_a), torch.from_numpy(pos_b)])
            col = torch.zeros(m, dtype=self.dtype)
            if rows:
                idx = np.concatenate(rows)
                valid[idx, s] = True
                col = col.index_put((torch.from_numpy(idx),),
                                    torch.log(torch.cat(vals).clamp(min=cfg.log_eps)))
            columns.append(col)
        return torch.stack(columns, dim=1), valid

    def _sampled_log_probs_masked(self, enc_a, enc_b, la, lb, gi, gj):
        """Same quantity as the grouped path, all samples and topics in one pass."""
        cfg = self.config
        xa, xb = self.augmenter.forward_masked(enc_a.coarse, enc_b.coarse, la, lb)
        mask = torch.as_tensor(la[:, :, None] == lb[:, None, :])
        d = xa.shape[-1]
        prob = masked_dual_softmax(xa / d ** 0.5, xb / d ** 0.5, mask, cfg.ds_temperature)
        picked = prob[:, torch.from_numpy(gi), torch.from_numpy(gj)].T      # M x S
        valid = (la[:, gi] == lb[:, gj]).T
        return torch.log(picked.clamp(min=cfg.log_eps)), valid

    def _fine_training_loss(self, enc_a, enc_b, gi, gj, homography, rng):
        cfg = self.config
        if len(gi) > cfg.fine_matches_per_pair:
            pick = np.sort(rng.choice(len(gi), cfg.fine_matches_per_pair, replace=False))
            gi, gj = gi[pick], gj[pick]
        ca = coarse_to_fine_center(gi, enc_a.grid_hw[1])
        cb = coarse_to_fine_center(gj, enc_b.grid_hw[1])
        target = image_to_fine(warp_point(homography, fine_to_image(ca))) - cb
        r = cfg.patch_size // 2
        h_a, w_a = enc_a.fine.shape[:2]
        h_b, w_b = enc_b.fine.shape[:2]
        ok = (np.abs(target).max(axis=1) <= r)
        ok &= (ca[:, 0] >= r) & (ca[:, 0] < w_a - r) & (ca[:, 1] >= r) & (ca[:, 1] < h_a - r)
        ok &= (cb[:, 0] >= r) & (cb[:, 0] < w_b - r) & (cb[:, 1] >= r) & (cb[:, 1] < h_b - r)
        if not ok.any():
            return torch.zeros((), dtype=self.dtype)
        pa, _ = crop_patches(enc_a.fine, ca[ok], cfg.patch_size)
        pb, _ = crop_patches(enc_b.fine, cb[ok], cfg.patch_size)
        offsets, variance = refine(pa, pb, self.refiner)
        return losses.fine_loss(offsets, torch.as_tensor(target[ok], dtype=self.dtype), variance)

    def training_losses(self, pairs, seed, step):
        """Mean per-pair losses for a list of ImagePair objects."""
        encs = self.encode([im for p in pairs for im in (p.image_a, p.image_b)])
        terms = {"coarse_pos": [], "coarse_neg": [], "fine": []}
        for b, pair in enumerate(pairs):
            out = self.pair_losses(encs[2 * b], encs[2 * b + 1], pair.homography, seed, (step, b))
            if out is None:
                continue
            for k in terms:
                terms[k].append(out[k])
        if not terms["coarse_pos"]:
            zero = torch.zeros((), dtype=self.dtype, requires_grad=True)
            return {"coarse_pos": zero, "coarse_neg": zero, "fine": zero,
                    "total": zero}
        res = {k: torch.stack(v).mean() for k, v in terms.items()}
        res["total"] = losses.total_loss(res["coarse_pos"], res["coarse_neg"], res["fine"])
        return res

    # ---- inference ----------------------------------------------------------

    @torch.no_grad()
    def match(self, image_a, image_b, tau=None, n_covisible=None, kernel=None, counter=None):
        cfg = self.config
        tau = cfg.tau if tau is None else tau
        n_covisible = cfg.n_covisible if n_covisible is None else n_covisible
        was_training = self.training
        self.eval()
        try:
            enc_a, enc_b = self.encode([image_a, image_b])
            return self._match_encoded(enc_a, enc_b, tau, n_covisible, kernel, counter)
        finally:
            self.train(was_training)

    def _match_encoded(self, enc_a, enc_b, tau, n_covisible, kernel, counter):
        cfg = self.config
        la = argmax_assignments(enc_a.theta)
        lb = argmax_assignments(enc_b.theta)
        img_a = image_topic_distribution(enc_a.theta)
        img_b = image_topic_distribution(enc_b.theta)
        report = covisible_topics(img_a, img_b, n_covisible)
        groups, _, _ = augment_features(enc_a.coarse, enc_b.coarse, la, lb,
                                        np.sort(report.selected), self.augmenter,
                                        counter, kernel)
        mats = [(group_match_probability(g, cfg.ds_temperature).double().numpy(),
                 g.idx_a, g.idx_b, g.topic) for g in groups]
        coarse = select_coarse_matches(mats, tau, cfg.mutual_nn)
        if len(coarse):
            coarse.coherence = losses.topic_coherence(
                enc_a.theta, enc_b.theta, coarse.i, coarse.j).double().numpy()
        refined = self._refine(enc_a, enc_b, coarse, counter)
        return MatchResult(coarse, refined, report, la, lb, enc_a.grid_hw, enc_b.grid_hw,
                           img_a.double().numpy(), img_b.double().numpy())

    def _refine(self, enc_a, enc_b, coarse, counter=None):
        cfg = self.config
        ca = coarse_to_fine_center(coarse.i, enc_a.grid_hw[1])
        cb = coarse_to_fine_center(coarse.j, enc_b.grid_hw[1])
        _, keep_a = crop_patches(enc_a.fine, ca, cfg.patch_size)
        _, keep_b = crop_patches(enc_b.fine, cb, cfg.patch_size)
        keep = keep_a & keep_b
        empty = np.zeros((0, 2))
        if not keep.any():
            return RefinedMatches(empty, empty, np.zeros(0), np.zeros(0),
                                  np.zeros(0, dtype=np.int64), int(len(keep)))
        pa, _ = crop_patches(enc_a.fine, ca[keep], cfg.patch_size)
        pb, _ = crop_patches(enc_b.fine, cb[keep], cfg.patch_size)
        offsets, variance = refine(pa, pb, self.refiner, cfg.hard_argmax, counter)
        pts_a = fine_to_image(ca[keep])
        pts_b = fine_to_image(cb[keep] + offsets.double().numpy())
        h_a, w_a = enc_a.image_hw
        h_b, w_b = enc_b.image_hw
        inside = ((pts_a[:, 0] <= w_a - 1) & (pts_a[:, 1] <= h_a - 1)
                  & (pts_b[:, 0] >= 0) & (pts_b[:, 1] >= 0)
                  & (pts_b[:, 0] <= w_b - 1) & (pts_b[:, 1] <= h_b - 1))
        return RefinedMatches(pts_a[inside], pts_b[inside], coarse.confidence[keep][inside],
                              variance.double().numpy()[inside], coarse.topic[keep][inside],
                              int((~keep).sum() + (~inside).sum()))
