"""Slow, obviously-correct reference implementations of the metrics and top-k."""

from __future__ import annotations

import itertools
import math

import numpy as np


def _order(scores):
    # descending score, ties by input position
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y > 0]
    neg = [s for s, y in zip(scores, labels) if y <= 0]
    if not pos or not neg:
        return None
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def mrr_ranks(scores, labels):
    order = _order(scores)
    rr = [1.0 / (rank + 1) for rank, i in enumerate(order) if labels[i] > 0]
    return sum(rr) / len(rr) if rr else None


def ndcg_placements(scores, labels, k):
    """DCG of the ranking over the best DCG across every placement of the gains."""
    if not any(y > 0 for y in labels):
        return None
    n = len(labels)

    def dcg(seq):
        return sum(g / math.log2(r + 2) for r, g in enumerate(seq[:k]))

    order = _order(scores)
    got = dcg([labels[i] for i in order])
    best = 0.0
    for perm in set(itertools.permutations(labels)) if n <= 6 else _binary_placements(labels):
        best = max(best, dcg(list(perm)))
    return got / best


def _binary_placements(labels):
    n, ones = len(labels), int(sum(1 for y in labels if y > 0))
    assert set(labels) <= {0, 1}
    for pos in itertools.combinations(range(n), ones):
        seq = [0] * n
        for p in pos:
            seq[p] = 1
        yield seq


def topk_full_sort(pool, u, k, exclude=()):
    scores = [float(np.dot(row, u)) for row in pool]
    excluded = set(int(e) for e in exclude)
    ranked = [i for i in sorted(range(len(scores)), key=lambda i: (-scores[i], i)) if i not in excluded]
    return ranked[:k]
