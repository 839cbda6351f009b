"""Attention kernels, FLOP accounting, finite-difference gradient checks and seeding.

Tensors are plain ``torch.Tensor`` objects; reverse-mode gradients come from
torch autograd. Attention inputs are ``(..., n, d)``; leading dimensions are batched.
"""
from collections import defaultdict
import hashlib

import numpy as np
import torch
import torch.nn.functional as F


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


class FlopCounter:
    """Multiply-accumulate tally with a per-operation breakdown."""

    def __init__(self):
        self.breakdown = defaultdict(int)

    def add(self, op, macs):
        if macs < 0:
            raise ContractError("negative MAC count")
        self.breakdown[op] += int(macs)

    @property
    def total(self):
        return sum(self.breakdown.values())

    def reset(self):
        self.breakdown.clear()

    def __repr__(self):
        return f"FlopCounter(total={self.total}, breakdown={dict(self.breakdown)})"


def _check_qkv(q, k, v, heads):
    if q.dim() < 2 or k.dim() != q.dim() or v.dim() != q.dim():
        raise DimensionError("attention expects (..., n, d) tensors of equal rank")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise DimensionError("batch dimensions differ")
    if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1]:
        raise DimensionError(f"width mismatch: {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("keys and values differ in length")
    if q.shape[-2] < 1 or k.shape[-2] < 1:
        raise DimensionError("empty query or key set")
    if heads < 1 or q.shape[-1] % heads:
        raise DimensionError(f"width {q.shape[-1]} not divisible by {heads} heads")
    for t in (q, k, v):
        if not torch.isfinite(t).all():
            raise NumericError("non-finite attention input")


def _split_heads(x, heads):
    *batch, n, d = x.shape
    return x.reshape(*batch, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x):
    *batch, heads, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*batch, n, heads * dh)


def _batch_count(x):
    return int(np.prod(x.shape[:-2], dtype=np.int64)) if x.dim() > 2 else 1


def dot_product_flops(n_q, n_k, d):
    # scores plus weighted sum of values
    return 2 * n_q * n_k * d


def linear_attention_flops(n_q, n_k, d, heads):
    dh = d // heads
    # phi(K)^T V and phi(Q)(KV) per head, plus the two normaliser contractions
    return heads * (n_k * dh * dh + n_q * dh * dh) + n_k * d + n_q * d


def dot_product_attention(q, k, v, heads, counter=None, mask=None):
    """Softmax attention per head. ``mask`` (..., n_q, n_k) marks allowed keys;
    query rows without any allowed key receive a zero output."""
    _check_qkv(q, k, v, heads)
    n_q, d = q.shape[-2:]
    n_k = k.shape[-2]
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = qh @ kh.transpose(-1, -2) / (d // heads) ** 0.5
    if mask is None:
        out = torch.softmax(scores, dim=-1) @ vh
        macs = _batch_count(q) * dot_product_flops(n_q, n_k, d)
    else:
        allowed = mask.unsqueeze(-3)
        has_key = allowed.any(dim=-1, keepdim=True)
        # additive bias is cheaper than masked_fill through autograd; keyless rows stay finite
        bias = torch.zeros(allowed.shape, dtype=scores.dtype).masked_fill(~(allowed | ~has_key),
                                                                          float("-inf"))
        weights = torch.softmax(scores + bias, dim=-1) * has_key
        out = weights @ vh
        macs = 2 * int(mask.sum()) * d
    if counter is not None:
        counter.add("dot_attention", macs)
    return _merge_heads(out)


def elu_feature_map(x):
    return F.elu(x) + 1


def linear_attention(q, k, v, heads, counter=None):
    _check_qkv(q, k, v, heads)
    n_q, d = q.shape[-2:]
    n_k = k.shape[-2]
    qh = _split_heads(elu_feature_map(q), heads)
    kh = _split_heads(elu_feature_map(k), heads)
    vh = _split_heads(v, heads)
    kv = kh.transpose(-1, -2) @ vh                        # ... x heads x dh x dh
    denom = qh @ kh.sum(dim=-2).unsqueeze(-1)             # ... x heads x n_q x 1
    if denom.min() < 1e-12:
        raise NumericError("linear attention normaliser vanished")
    out = (qh @ kv) / denom
    if counter is not None:
        counter.add("linear_attention", _batch_count(q) * linear_attention_flops(n_q, n_k, d, heads))
    return _merge_heads(out)


KERNELS = {"dot": dot_product_attention, "linear": linear_attention}


def attention(q, k, v, heads, kernel="dot", counter=None, mask=None):
    try:
        fn = KERNELS[kernel]
    except KeyError:
        raise ContractError(f"unknown attention kernel {kernel!r}") from None
    if mask is not None:
        if kernel != "dot":
            raise ContractError("masked attention is only available for the dot kernel")
        return fn(q, k, v, heads, counter, mask=mask)
    return fn(q, k, v, heads, counter)


def grad_check(fn, x, eps=1e-6):
    """Compare the autograd gradient of scalar ``fn`` at ``x`` with central differences.

    Returns max_i |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps={eps} outside [1e-7, 1e-3]")
    x = x.detach().clone().requires_grad_(True)
    y = fn(x)
    if not torch.is_tensor(y) or y.numel() != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    (g_ad,) = torch.autograd.grad(y.reshape(()), x, allow_unused=True)
    if g_ad is None:
        g_ad = torch.zeros_like(x)
    g_ad = g_ad.detach().reshape(-1).double()

    flat = x.detach().clone().reshape(-1)
    g_fd = torch.empty_like(g_ad)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(fn(flat.reshape(x.shape)))
            flat[i] = orig - eps
            f_minus = float(fn(flat.reshape(x.shape)))
            flat[i] = orig
            g_fd[i] = (f_plus - f_minus) / (2 * eps)
    scale = torch.clamp(torch.maximum(g_ad.abs(), g_fd.abs()), min=1.0)
    return float(((g_ad - g_fd).abs() / scale).max())


def make_rng(seed, *stream):
    """Counter-based generator keyed by a 64-bit seed and a stream path.

    Philox streams for different paths are independent, so results do not depend
    on the order in which streams are consumed.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) & 0xFFFFFFFFFFFFFFFF for s in stream]
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(ss))


def stable_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
