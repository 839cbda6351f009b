"""Coarse-stage cost of topic-restricted vs full attention.

Features and weights are random (seeded); topic labels are uniform, i.e. every
topic owns N/K features in both images. MAC counts are deterministic; the
wall-time columns are not.
"""
import time

import numpy as np
import torch

from .coarse import TopicAugmenter, augment_features
from .numerics import FlopCounter, make_rng
from .topics import TopicBank, infer_local_topics

BENCH_COLUMNS = ("size", "n", "kernel", "k", "kco", "full_macs", "restricted_macs", "ratio",
                 "expected_ratio", "topic_macs", "full_ms", "restricted_ms")


def uniform_labels(n, k, seed, stream=0):
    labels = np.arange(n) % k
    return make_rng(seed, 0x42454E4348, stream).permutation(labels)


def _timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def _setup(size, kernel, d, heads, seed):
    n = (size // 8) ** 2
    torch.manual_seed(seed)
    aug = TopicAugmenter(d, heads, kernel).eval()
    gen = torch.Generator().manual_seed(seed)
    return n, aug, torch.randn(n, d, generator=gen), torch.randn(n, d, generator=gen)


def full_pass(size, kernel, d=64, heads=4, seed=0, repeat=1, timing=True):
    """(MACs, ms) of the augmentation block applied to all N cells at once."""
    n, aug, fa, fb = _setup(size, kernel, d, heads, seed)
    counter = FlopCounter()
    with torch.no_grad():
        aug(fa, fb, counter)
        ms = _timed(lambda: aug(fa, fb), repeat) if timing else float("nan")
    return counter.total, ms


def bench_config(size, k, kco, kernel, d=64, heads=4, seed=0, repeat=1, timing=True, full=None):
    """One row: augmentation MACs over all N cells vs over the first K_co topics.

    ``full`` may carry a precomputed :func:`full_pass` result for this size and kernel.
    """
    if full is None:
        full = full_pass(size, kernel, d, heads, seed, repeat, timing)
    n, aug, fa, fb = _setup(size, kernel, d, heads, seed)
    bank = TopicBank(k, d, heads, 2, kernel).eval()
    la = uniform_labels(n, k, seed, 0)
    lb = uniform_labels(n, k, seed, 1)
    topic_ids = list(range(kco))

    restricted, topic = FlopCounter(), FlopCounter()
    with torch.no_grad():
        augment_features(fa, fb, la, lb, topic_ids, aug, restricted)
        infer_local_topics(bank, fa, topic)
        restricted_ms = float("nan")
        if timing:
            restricted_ms = _timed(lambda: augment_features(fa, fb, la, lb, topic_ids, aug), repeat)
    full_macs, full_ms = full
    expected = kco / k if kernel == "linear" else kco / k ** 2
    return {"size": size, "n": n, "kernel": kernel, "k": k, "kco": kco,
            "full_macs": full_macs, "restricted_macs": restricted.total,
            "ratio": restricted.total / full_macs, "expected_ratio": expected,
            "topic_macs": topic.total, "full_ms": full_ms, "restricted_ms": restricted_ms}


def sweep(sizes=(128, 256, 512), topics=(8, 16), kcos=(1, 2, 3, 4), kernels=("dot", "linear"),
          d=64, heads=4, seed=0, timing=True):
    rows = []
    for size in sizes:
        for kernel in kernels:
            full = full_pass(size, kernel, d, heads, seed, timing=timing)
            for k in topics:
                for kco in kcos:
                    if kco < k:
                        rows.append(bench_config(size, k, kco, kernel, d, heads, seed,
                                                 timing=timing, full=full))
    return rows


def format_rows(rows):
    lines = ["\t".join(BENCH_COLUMNS)]
    for r in rows:
        lines.append("\t".join([
            str(r["size"]), str(r["n"]), r["kernel"], str(r["k"]), str(r["kco"]),
            str(r["full_macs"]), str(r["restricted_macs"]), f"{r['ratio']:.6f}",
            f"{r['expected_ratio']:.6f}", str(r["topic_macs"]),
            f"{r['full_ms']:.3f}", f"{r['restricted_ms']:.3f}"]))
    return "\n".join(lines) + "\n"
