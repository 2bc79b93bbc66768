"""Geometry metrics between aligned representations.

Linear CKA with double-centering, standardized L2 distance, layer-wise token
norms, update-vector cosine, and aggregation of extractor-stored pre/post-LN
norms.
"""

from __future__ import annotations

import numpy as np

from .align import STANDARDIZE_EPS, AlignmentPath, _standardize_rows


class SimilarityError(Exception):
    pass


class UndefinedCkaError(SimilarityError):
    """Raised when a centered Gram matrix is zero (all rows identical)."""


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA: normalized HSIC of the double-centered Gram matrices.

    Invariant to orthogonal right-multiplication, isotropic scaling, and
    row-mean shifts. Result lies in [0, 1] up to numerical slack.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise SimilarityError("expected (N, D) matrices with equal N")
    n = x.shape[0]
    if n < 2:
        raise SimilarityError("CKA needs at least 2 rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    k = xc @ xc.T  # equals H (X X^T) H
    l = yc @ yc.T
    nk = np.linalg.norm(k)
    nl = np.linalg.norm(l)
    if nk == 0.0 or nl == 0.0:
        raise UndefinedCkaError("centered Gram matrix is zero; CKA undefined")
    return float(np.sum(k * l) / (nk * nl))


def standardized_l2(x: np.ndarray, y: np.ndarray) -> float:
    """Mean rowwise L2 distance after per-row feature standardization."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise SimilarityError("expected matching (N, D) matrices")
    if x.shape[0] < 1:
        raise SimilarityError("need at least one row")
    diff = _standardize_rows(x) - _standardize_rows(y)
    return float(np.linalg.norm(diff, axis=1).mean())


def token_norm_curve(stack: np.ndarray, span: tuple[int, int], mask) -> np.ndarray:
    """Per-layer mean L2 token norm over the masked question span."""
    start, end = span
    mask = np.asarray(mask, dtype=bool)
    sel = mask[start:end]
    if not sel.any():
        raise SimilarityError("question span is empty after masking")
    sub = stack[:, start:end][:, sel]
    return np.linalg.norm(sub.astype(np.float64), axis=2).mean(axis=1)


def update_cosine_matrix(
    s_stack: np.ndarray, t_stack: np.ndarray, path: AlignmentPath
) -> np.ndarray:
    """Mean cosine between per-layer update vectors of aligned token pairs.

    Entry (a, b) averages cosine(s[a+1,i] - s[a,i], t[b+1,j] - t[b,j]) over
    path pairs (i, j). Zero update vectors contribute 0 and stay counted.
    """
    if s_stack.shape[0] < 2 or t_stack.shape[0] < 2:
        raise SimilarityError("both stacks need at least 2 layers")
    ii = np.array([p[0] for p in path.pairs])
    jj = np.array([p[1] for p in path.pairs])
    du = np.diff(s_stack.astype(np.float64), axis=0)[:, ii, :]  # (Ls-1, N, D)
    dv = np.diff(t_stack.astype(np.float64), axis=0)[:, jj, :]  # (Lt-1, N, D)
    nu = np.linalg.norm(du, axis=2)
    nv = np.linalg.norm(dv, axis=2)
    du = du / np.where(nu == 0.0, 1.0, nu)[:, :, None]
    dv = dv / np.where(nv == 0.0, 1.0, nv)[:, :, None]
    du[nu == 0.0] = 0.0
    dv[nv == 0.0] = 0.0
    return np.einsum("and,bnd->ab", du, dv) / len(path.pairs)


def ln_norm_curves(
    preln: np.ndarray | None, postln: np.ndarray | None, span: tuple[int, int], mask
) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer masked means of extractor-stored pre/post-LN norms."""
    if preln is None or postln is None:
        raise SimilarityError("bundle does not store pre/post-LN norm arrays")
    start, end = span
    mask = np.asarray(mask, dtype=bool)
    sel = mask[start:end]
    if not sel.any():
        raise SimilarityError("question span is empty after masking")
    pre = preln[:, start:end][:, sel].astype(np.float64).mean(axis=1)
    post = postln[:, start:end][:, sel].astype(np.float64).mean(axis=1)
    return pre, post


__all__ = [
    "SimilarityError",
    "UndefinedCkaError",
    "linear_cka",
    "standardized_l2",
    "token_norm_curve",
    "update_cosine_matrix",
    "ln_norm_curves",
    "STANDARDIZE_EPS",
]
