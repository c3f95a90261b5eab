"""Independent reference implementations used as test oracles."""
import math

import numpy as np


def monotone_paths(n, m):
    """Every alignment path from (0, 0) to (n-1, m-1) with unit steps right, down or diagonal."""
    out = []

    def walk(i, j, path):
        if (i, j) == (n - 1, m - 1):
            out.append(path)
            return
        if i + 1 < n:
            walk(i + 1, j, path + [(i + 1, j)])
        if j + 1 < m:
            walk(i, j + 1, path + [(i, j + 1)])
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, path + [(i + 1, j + 1)])

    walk(0, 0, [(0, 0)])
    return out


def _cost(a, b, i, j):
    d = np.atleast_1d(a[i]) - np.atleast_1d(b[j])
    return float(np.sum(d * d))


def dtw_brute(a, b):
    return min(sum(_cost(a, b, i, j) for i, j in p) for p in monotone_paths(len(a), len(b)))


def gak_brute(a, b, sigma):
    total = 0.0
    for p in monotone_paths(len(a), len(b)):
        prod = 1.0
        for i, j in p:
            e = math.exp(-_cost(a, b, i, j) / (2 * sigma * sigma))
            prod *= e / (2 - e)
        total += prod
    return total


def path_length_c(n):
    """Isolation-forest normaliser with harmonic numbers summed term by term."""
    if n <= 1:
        return 0.0
    return 2.0 * sum(1.0 / k for k in range(1, n)) - 2.0 * (n - 1) / n
