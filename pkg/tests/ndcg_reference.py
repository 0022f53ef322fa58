"""Plain-loop reference metrics, written separately from the package code."""

import math


def ndcg5(system_top, oracle_top):
    rank_of = {doc: r for r, doc in enumerate(oracle_top[:5], start=1)}
    dcg = 0.0
    for i, doc in enumerate(system_top[:5], start=1):
        gain = 6 - rank_of[doc] if doc in rank_of else 0
        dcg += (2 ** gain - 1) / math.log2(i + 1)
    ideal = sum((2 ** (6 - r) - 1) / math.log2(r + 1) for r in range(1, 6))
    return dcg / ideal


def acc1(system_top, oracle_top):
    return float(system_top[0] == oracle_top[0])


def prec5(system_top, oracle_top):
    return len(set(system_top[:5]) & set(oracle_top[:5])) / 5
