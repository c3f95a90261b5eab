"""Comparison detectors: DTW, global alignment kernel (GAK), isolation forest.

Each has an adapter that turns pairwise or per-vehicle outputs into one
fleet score in [0, 1], higher meaning more abnormal, so all methods share
the detector's thresholding and evaluation path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
from numba import njit

from .core import FleetFlow

EULER_GAMMA = 0.5772156649015329


# --- dynamic time warping ----------------------------------------------------------


@dataclass(frozen=True)
class DtwConfig:
    band: Optional[int] = None  # Sakoe-Chiba radius; None = unconstrained

    def __post_init__(self):
        if self.band is not None and self.band < 0:
            raise ValueError("band radius must be >= 0")


@njit(cache=True)
def _dtw(a, b, band):
    n, m = a.shape[0], b.shape[0]
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        lo, hi = 1, m
        if band >= 0:
            lo = max(1, i - band)
            hi = min(m, i + band)
        for j in range(lo, hi + 1):
            c = 0.0
            for k in range(a.shape[1]):
                diff = a[i - 1, k] - b[j - 1, k]
                c += diff * diff
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            D[i, j] = c + best
    return D[n, m]


def _as_series(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("series must be a non-empty (T, d) array")
    return np.ascontiguousarray(a)


def dtw_distance(a, b, cfg: DtwConfig = DtwConfig()) -> float:
    """Minimal accumulated squared-Euclidean cost over monotone alignments."""
    a, b = _as_series(a), _as_series(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("series differ in feature count")
    band = -1 if cfg.band is None else max(cfg.band, abs(a.shape[0] - b.shape[0]))
    return float(_dtw(a, b, band))


# --- global alignment kernel ---------------------------------------------------------


@dataclass(frozen=True)
class GakConfig:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("GAK bandwidth sigma must be > 0")


@njit(cache=True)
def _logaddexp3(x, y, z):
    mx = max(x, max(y, z))
    if mx == -np.inf:
        return -np.inf
    return mx + math.log(math.exp(x - mx) + math.exp(y - mx) + math.exp(z - mx))


@njit(cache=True)
def _gak_log(a, b, sigma):
    n, m = a.shape[0], b.shape[0]
    R = np.full((n + 1, m + 1), -np.inf)
    R[0, 0] = 0.0
    inv = 1.0 / (2.0 * sigma * sigma)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d2 = 0.0
            for k in range(a.shape[1]):
                diff = a[i - 1, k] - b[j - 1, k]
                d2 += diff * diff
            g = -d2 * inv
            # log of exp(g) / (2 - exp(g))
            log_k = g - math.log(2.0 - math.exp(g))
            R[i, j] = log_k + _logaddexp3(R[i - 1, j], R[i, j - 1], R[i - 1, j - 1])
    return R[n, m]


def gak_log_kernel(a, b, cfg: GakConfig = GakConfig()) -> float:
    """log K(a, b) of the global alignment kernel, computed in log space."""
    a, b = _as_series(a), _as_series(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("series differ in feature count")
    return float(_gak_log(a, b, float(cfg.sigma)))


def gak_gram(series: Sequence[np.ndarray], cfg: GakConfig = GakConfig(), normalized: bool = False) -> np.ndarray:
    n = len(series)
    logK = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            logK[i, j] = logK[j, i] = gak_log_kernel(series[i], series[j], cfg)
    if not normalized:
        return np.exp(logK)
    diag = np.diag(logK)
    return np.exp(logK - 0.5 * (diag[:, None] + diag[None, :]))


def median_sigma(windows: np.ndarray, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise distance between feature points (the usual bandwidth heuristic)."""
    pts = np.asarray(windows, dtype=np.float64).reshape(-1, np.shape(windows)[-1])
    if len(pts) > max_points:
        pts = pts[np.random.default_rng(seed).choice(len(pts), max_points, replace=False)]
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))[np.triu_indices(len(pts), 1)]
    med = float(np.median(d)) if len(d) else 1.0
    return med if med > 0 else 1.0


# --- fleet adapters ----------------------------------------------------------------


def _pairs(m: int):
    if m < 2:
        raise ValueError("fleet score needs at least two members")
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def fleet_score_dtw(windows, cfg: DtwConfig = DtwConfig()) -> float:
    """tanh of the mean pairwise DTW cost divided by T*d."""
    windows = np.asarray(windows, dtype=np.float64)
    m, T, d = windows.shape
    costs = [dtw_distance(windows[i], windows[j], cfg) for i, j in _pairs(m)]
    return float(np.tanh(np.mean(costs) / (T * d)))


def fleet_score_gak(windows, cfg: GakConfig = GakConfig()) -> float:
    """Mean pairwise ``1 - normalized kernel``, clamped to [0, 1]."""
    windows = np.asarray(windows, dtype=np.float64)
    m = windows.shape[0]
    self_k = [gak_log_kernel(w, w, cfg) for w in windows]
    vals = []
    for i, j in _pairs(m):
        lk = gak_log_kernel(windows[i], windows[j], cfg)
        vals.append(min(1.0, max(0.0, 1.0 - math.exp(lk - 0.5 * (self_k[i] + self_k[j])))))
    return float(np.mean(vals))


# --- isolation forest ----------------------------------------------------------------


def harmonic(n: int) -> float:
    """Exact harmonic number H(n) for moderate n, asymptotic expansion beyond."""
    if n <= 0:
        return 0.0
    if n <= 100_000:
        return math.fsum(1.0 / k for k in range(1, n + 1))
    return math.log(n) + EULER_GAMMA + 1.0 / (2 * n) - 1.0 / (12 * n * n)


@lru_cache(maxsize=None)
def c_factor(n: int) -> float:
    """Average unsuccessful-search path length in a BST of n points."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass(frozen=True)
class IForestConfig:
    n_trees: int = 100
    subsample: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.subsample < 2:
            raise ValueError("need n_trees >= 1 and subsample >= 2")


@dataclass
class _Tree:
    feature: np.ndarray  # -1 marks a leaf
    split: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    leaf_c: np.ndarray  # c(size) for leaves, the path-length correction


@njit(cache=True)
def _grow(X, max_depth, u_feat, u_split):
    """Iterative isolation-tree build; node k consumes ``u_feat[k]`` and ``u_split[k]``."""
    n, k_dim = X.shape
    cap = 2 * n
    feature = np.full(cap, -1, np.int64)
    split = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    size = np.zeros(cap, np.int64)
    depth = np.zeros(cap, np.int64)
    order = np.arange(n)
    # stack of (node, start, stop) ranges into ``order``
    stack = np.empty((cap, 3), np.int64)
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, n
    top, n_nodes = 1, 1
    varying = np.empty(k_dim, np.int64)
    lo = np.empty(k_dim)
    hi = np.empty(k_dim)
    while top > 0:
        top -= 1
        node, a, b = stack[top, 0], stack[top, 1], stack[top, 2]
        size[node] = b - a
        if depth[node] >= max_depth or b - a <= 1:
            continue
        for q in range(k_dim):
            lo[q] = X[order[a], q]
            hi[q] = lo[q]
        for i in range(a + 1, b):
            for q in range(k_dim):
                v = X[order[i], q]
                if v < lo[q]:
                    lo[q] = v
                if v > hi[q]:
                    hi[q] = v
        nv = 0
        for q in range(k_dim):
            if hi[q] > lo[q]:
                varying[nv] = q
                nv += 1
        if nv == 0:
            continue
        q = varying[min(int(u_feat[node] * nv), nv - 1)]
        p = lo[q] + u_split[node] * (hi[q] - lo[q])
        # partition order[a:b] so that values < p come first
        i, j = a, b - 1
        while i <= j:
            if X[order[i], q] < p:
                i += 1
            else:
                order[i], order[j] = order[j], order[i]
                j -= 1
        feature[node], split[node] = q, p
        l, r = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = l, r
        depth[l] = depth[r] = depth[node] + 1
        stack[top, 0], stack[top, 1], stack[top, 2] = r, i, b
        stack[top + 1, 0], stack[top + 1, 1], stack[top + 1, 2] = l, a, i
        top += 2
    return feature[:n_nodes], split[:n_nodes], left[:n_nodes], right[:n_nodes], size[:n_nodes], depth[:n_nodes]


def _build_tree(X: np.ndarray, rng: np.random.Generator, max_depth: int) -> _Tree:
    cap = 2 * len(X)
    u_feat, u_split = rng.random(cap), rng.random(cap)
    feature, split, left, right, size, depth = _grow(np.ascontiguousarray(X), max_depth, u_feat, u_split)
    leaf_c = np.array([c_factor(int(s)) if f < 0 else 0.0 for f, s in zip(feature, size)])
    return _Tree(feature, split, left, right, depth, leaf_c)


@njit(cache=True)
def _path_lengths(X, feature, split, left, right, depth, leaf_c):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            node = left[node] if X[i, feature[node]] < split[node] else right[node]
        out[i] = depth[node] + leaf_c[node]
    return out


class IsolationForest:
    def __init__(self, trees: List[_Tree], subsample: int):
        self.trees = trees
        self.subsample = subsample

    def path_lengths(self, X) -> np.ndarray:
        """(n_trees, N) path lengths, each leaf adjusted by c(leaf size)."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        return np.stack(
            [_path_lengths(X, t.feature, t.split, t.left, t.right, t.depth, t.leaf_c) for t in self.trees]
        )

    def score(self, X) -> np.ndarray:
        """Anomaly score 2^(-E[h] / c(psi)) in (0, 1); higher = more isolated."""
        eh = self.path_lengths(X).mean(axis=0)
        return np.power(2.0, -eh / c_factor(self.subsample))


def iforest_fit(X, cfg: IForestConfig = IForestConfig()) -> IsolationForest:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("isolation forest needs an (N >= 2, k) matrix")
    psi = min(cfg.subsample, len(X))
    max_depth = int(math.ceil(math.log2(psi)))
    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, t])
        idx = rng.choice(len(X), psi, replace=False)
        trees.append(_build_tree(X[idx], rng, max_depth))
    return IsolationForest(trees, psi)


def vehicle_summary(flow: FleetFlow) -> np.ndarray:
    """(m, 4): mean speed, speed std, max |acceleration|, net displacement."""
    rows = []
    for t in flow.members:
        v = t.speed
        acc = np.abs(np.diff(v)) * t.rate_hz if len(v) > 1 else np.zeros(1)
        disp = math.hypot(t.samples[-1, 1] - t.samples[0, 1], t.samples[-1, 2] - t.samples[0, 2])
        rows.append([v.mean(), v.std(), acc.max(), disp])
    return np.asarray(rows)


def fleet_score_iforest(flows: Sequence[FleetFlow], cfg: IForestConfig = IForestConfig()) -> np.ndarray:
    """Fit one forest on every vehicle of ``flows``; flow score = max member score."""
    if len(flows) < 2:
        raise ValueError("isolation-forest fleet scoring needs at least two flows")
    summaries = [vehicle_summary(f) for f in flows]
    X = np.concatenate(summaries)
    s = iforest_fit(X, cfg).score(X)
    out, k = [], 0
    for sm in summaries:
        out.append(float(s[k : k + len(sm)].max()))
        k += len(sm)
    return np.asarray(out)
