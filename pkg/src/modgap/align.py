"""Speech-text token alignment: similarity matrix, DTW, and path statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STANDARDIZE_EPS = 1e-6


class AlignError(Exception):
    pass


@dataclass
class AlignConfig:
    base_layer: int = 10
    metric: str = "cosine"  # or "normalized_l2"
    step_penalty: float = 0.0
    band_radius: int | None = None
    use_valid_mask: bool = True

    def __post_init__(self):
        if self.metric not in ("cosine", "normalized_l2"):
            raise AlignError(f"unknown metric {self.metric!r}")
        if self.step_penalty < 0:
            raise AlignError("step_penalty must be >= 0")
        if self.band_radius is not None and self.band_radius < 1:
            raise AlignError("band_radius must be >= 1")


@dataclass
class AlignmentPath:
    pairs: list[tuple[int, int]]
    cumulative_score: float


@dataclass
class PathStats:
    r2: float
    stall_fraction: float


def _standardize_rows(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    sigma = x.std(axis=1, keepdims=True)
    return (x - mu) / (sigma + STANDARDIZE_EPS)


def build_similarity_matrix(hs: np.ndarray, ht: np.ndarray, cfg: AlignConfig) -> np.ndarray:
    """Pairwise token similarity between a speech slice and a text slice.

    Both inputs are (T, D) slices of one layer, already restricted to the
    question span and valid mask. Higher values mean more similar for both
    metrics (normalized_l2 is negated).
    """
    hs = np.asarray(hs, dtype=np.float64)
    ht = np.asarray(ht, dtype=np.float64)
    if hs.ndim != 2 or ht.ndim != 2 or hs.shape[1] != ht.shape[1]:
        raise AlignError("expected (T, D) slices with matching D")
    if hs.shape[0] == 0 or ht.shape[0] == 0:
        raise AlignError("empty token span")
    if cfg.metric == "cosine":
        ns = np.linalg.norm(hs, axis=1)
        nt = np.linalg.norm(ht, axis=1)
        m = hs @ ht.T
        # zero-norm rows cannot carry a direction; their entries are flagged to 0
        safe_s = np.where(ns == 0.0, 1.0, ns)
        safe_t = np.where(nt == 0.0, 1.0, nt)
        m /= safe_s[:, None]
        m /= safe_t[None, :]
        m[ns == 0.0, :] = 0.0
        m[:, nt == 0.0] = 0.0
        return m
    phi_s = _standardize_rows(hs)
    phi_t = _standardize_rows(ht)
    diff = phi_s[:, None, :] - phi_t[None, :, :]
    return -np.linalg.norm(diff, axis=2)


def _band_mask(t_s: int, t_t: int, band_radius: int | None) -> np.ndarray:
    if band_radius is None:
        return np.ones((t_s, t_t), dtype=bool)
    i = np.arange(t_s)[:, None]
    j = np.arange(t_t)[None, :]
    return np.abs(i - j) <= band_radius


def dtw_align(m: np.ndarray, cfg: AlignConfig) -> AlignmentPath:
    """Optimal monotonic alignment of a similarity matrix.

    The DP maximizes the cumulative similarity net of a unit dissimilarity
    baseline per visited cell, i.e. it minimizes total (1 - M) along the
    path. The baseline removes the long-path bias a raw similarity sum has
    when off-diagonal entries are positive (a raw sum rewards visiting more
    cells, so aligning X with itself would not return the diagonal).
    step_penalty is additionally subtracted for non-diagonal steps.
    Tie-breaking is diagonal > vertical (j-advance) > horizontal, fixed for
    cross-platform determinism. The returned cumulative_score is the raw
    similarity sum along the chosen path.
    """
    m = np.asarray(m, dtype=np.float64)
    t_s, t_t = m.shape
    if t_s < 1 or t_t < 1:
        raise AlignError("similarity matrix must be non-empty")
    band = _band_mask(t_s, t_t, cfg.band_radius)
    if not band[0, 0] or not band[t_s - 1, t_t - 1]:
        raise AlignError("band excludes a terminal cell; alignment infeasible")
    lam = cfg.step_penalty
    neg = -np.inf
    g = m - 1.0  # per-cell gain net of the dissimilarity baseline
    d = np.full((t_s, t_t), neg)
    d[0, 0] = g[0, 0]
    for i in range(t_s):
        for j in range(t_t):
            if (i, j) == (0, 0) or not band[i, j]:
                continue
            best = neg
            if i > 0 and j > 0 and d[i - 1, j - 1] > neg:
                best = d[i - 1, j - 1]
            if j > 0 and d[i, j - 1] > neg:
                best = max(best, d[i, j - 1] - lam)
            if i > 0 and d[i - 1, j] > neg:
                best = max(best, d[i - 1, j] - lam)
            if best > neg:
                d[i, j] = g[i, j] + best
    if d[t_s - 1, t_t - 1] == neg:
        raise AlignError("band admits no monotonic path to the terminal cell")
    pairs = [(t_s - 1, t_t - 1)]
    i, j = t_s - 1, t_t - 1
    while (i, j) != (0, 0):
        target = d[i, j] - g[i, j]
        # diagonal > vertical (j-advance) > horizontal
        if i > 0 and j > 0 and np.isclose(d[i - 1, j - 1], target, rtol=1e-12, atol=1e-9):
            i, j = i - 1, j - 1
        elif j > 0 and np.isclose(d[i, j - 1] - lam, target, rtol=1e-12, atol=1e-9):
            j = j - 1
        elif i > 0 and np.isclose(d[i - 1, j] - lam, target, rtol=1e-12, atol=1e-9):
            i = i - 1
        else:  # pragma: no cover - numerical fallback
            raise AlignError("backtracking failed; inconsistent DP table")
        pairs.append((i, j))
    pairs.reverse()
    raw = float(sum(m[i, j] for i, j in pairs))
    return AlignmentPath(pairs=pairs, cumulative_score=raw)


def path_stats(path: AlignmentPath) -> PathStats:
    """R^2 of j on i plus the fraction of steps where j does not advance."""
    pairs = path.pairs
    if len(pairs) < 2:
        raise AlignError("path must contain at least 2 pairs")
    ii = np.array([p[0] for p in pairs], dtype=np.float64)
    jj = np.array([p[1] for p in pairs], dtype=np.float64)
    steps = len(pairs) - 1
    stall = sum(1 for a, b in zip(pairs, pairs[1:]) if a[1] == b[1]) / steps
    if np.ptp(ii) == 0.0:
        return PathStats(r2=0.0, stall_fraction=stall)
    ss_tot = float(np.sum((jj - jj.mean()) ** 2))
    if ss_tot == 0.0:
        return PathStats(r2=1.0, stall_fraction=stall)
    slope, intercept = np.polyfit(ii, jj, 1)
    resid = jj - (slope * ii + intercept)
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    return PathStats(r2=r2, stall_fraction=stall)


def question_slice(stack_layer: np.ndarray, span: tuple[int, int], mask) -> np.ndarray:
    """Restrict one layer's (T, D) tokens to the question span and valid mask."""
    start, end = span
    mask = np.asarray(mask, dtype=bool)
    sub = stack_layer[start:end]
    sub_mask = mask[start:end]
    out = sub[sub_mask]
    if out.shape[0] == 0:
        raise AlignError("question span is empty after masking")
    return out
