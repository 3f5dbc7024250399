"""Independent brute-force oracles used to freeze expected test values.

These deliberately avoid the library's vectorized code paths: plain Python
loops, explicit sorts, and scalar arithmetic only.
"""

from __future__ import annotations

import math

import numpy as np

from ccreid.evaluation import Metrics


def oracle_cmc_map(distmat, query_ids, gallery_ids, mask,
                   max_rank: int = 50) -> Metrics:
    """Literal-definition CMC/mAP: per query, sort the valid gallery by
    (distance, gallery index), walk the ranking, and accumulate per-rank
    precision at every match."""
    num_q, num_g = len(query_ids), len(gallery_ids)
    cmc_counts = [0] * max_rank
    aps = []
    for qi in range(num_q):
        entries = [(float(distmat[qi][gj]), gj) for gj in range(num_g)
                   if mask[qi][gj]]
        entries.sort(key=lambda e: (e[0], e[1]))
        match_positions = []
        for rank, (_, gj) in enumerate(entries, start=1):
            if gallery_ids[gj] == query_ids[qi]:
                match_positions.append(rank)
        if not match_positions:
            continue
        ap = 0.0
        for r, rank in enumerate(match_positions, start=1):
            ap += r / rank
        aps.append(ap / len(match_positions))
        first = match_positions[0]
        for k in range(first, max_rank + 1):
            cmc_counts[k - 1] += 1
    if not aps:
        raise ValueError("no valid queries")
    num_valid = len(aps)
    cmc = np.array([c / num_valid for c in cmc_counts], dtype=np.float64)
    return Metrics(cmc=cmc, map=sum(aps) / num_valid,
                   num_valid_queries=num_valid)


def scalar_cross_entropy(logits, label: int, smoothing: float = 0.0) -> float:
    """Scalar label-smoothed cross-entropy for one row."""
    m = max(logits)
    lse = m + math.log(sum(math.exp(z - m) for z in logits))
    num_classes = len(logits)
    loss = 0.0
    for c, z in enumerate(logits):
        target = smoothing / num_classes
        if c == label:
            target += 1.0 - smoothing
        loss -= target * (z - lse)
    return loss


def enumerate_batch_hard_triplet(features, labels, margin: float) -> float:
    """All-anchors batch-hard triplet loss by explicit enumeration."""
    n = len(labels)

    def dist(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(features[a],
                                                          features[b])))

    terms = []
    for a in range(n):
        positives = [dist(a, j) for j in range(n)
                     if j != a and labels[j] == labels[a]]
        negatives = [dist(a, j) for j in range(n) if labels[j] != labels[a]]
        terms.append(max(0.0, margin + max(positives) - min(negatives)))
    return sum(terms) / n
