"""Layer-wise linear probing: multinomial logistic regression trained by
first-order optimization with a monotone line search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ProbeError(Exception):
    pass


@dataclass
class ProbeDataset:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        if not np.isfinite(self.features).all():
            raise ProbeError("non-finite features")
        if set(self.train_idx) & set(self.test_idx):
            raise ProbeError("train/test splits overlap")
        k = int(self.labels.max()) + 1
        train_classes = set(self.labels[self.train_idx].tolist())
        if train_classes != set(range(k)):
            raise ProbeError("every class must appear in the training split")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def probe_loss_grad(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray, l2_penalty: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """L2-regularized mean cross-entropy and its analytic gradient."""
    n = x.shape[0]
    p = _softmax(x @ weights.T + bias)
    nll = -np.log(np.clip(p[np.arange(n), y], 1e-300, None)).mean()
    loss = nll + 0.5 * l2_penalty * float((weights**2).sum())
    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    grad_w = delta.T @ x / n + l2_penalty * weights
    grad_b = delta.mean(axis=0)
    return float(loss), grad_w, grad_b


def train_linear_probe(
    ds: ProbeDataset,
    l2_penalty: float = 1e-3,
    max_iters: int = 2000,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Fit a multinomial logistic probe on the train split.

    Gradient descent from zero init with a backtracking line search, so the
    training loss never increases. Returns (weights (K, D), bias (K,),
    converged) where converged means the gradient norm fell below tol.
    """
    x = ds.features[ds.train_idx]
    y = ds.labels[ds.train_idx]
    n, d = x.shape
    k = int(ds.labels.max()) + 1
    if n < k or k < 2:
        raise ProbeError("need N >= K >= 2 training points")
    w = np.zeros((k, d))
    b = np.zeros(k)
    step = 1.0
    loss, gw, gb = probe_loss_grad(w, b, x, y, l2_penalty)
    converged = False
    for _ in range(max_iters):
        gnorm = np.sqrt((gw**2).sum() + (gb**2).sum())
        if gnorm <= tol:
            converged = True
            break
        while step > 1e-12:
            w_new = w - step * gw
            b_new = b - step * gb
            new_loss, gw_new, gb_new = probe_loss_grad(w_new, b_new, x, y, l2_penalty)
            if new_loss <= loss:
                break
            step *= 0.5
        else:
            break
        w, b, loss, gw, gb = w_new, b_new, new_loss, gw_new, gb_new
        step *= 1.5  # recover after conservative shrinks
    return w, b, converged


def eval_probe(weights: np.ndarray, bias: np.ndarray, ds: ProbeDataset) -> float:
    """Argmax accuracy on the test split (earliest class wins ties)."""
    x = ds.features[ds.test_idx]
    if x.shape[1] != weights.shape[1]:
        raise ProbeError("feature dimension does not match probe weights")
    scores = x @ weights.T + bias
    pred = scores.argmax(axis=1)
    return float((pred == ds.labels[ds.test_idx]).mean())


def mean_pooled_features(stack: np.ndarray, span: tuple[int, int], mask,
                         layer: int, pool: str = "mean") -> np.ndarray:
    """Per-sample probe feature at one layer: mean-pooled question-span
    hiddens by default, last span token behind the flag."""
    start, end = span
    mask = np.asarray(mask, dtype=bool)
    sel = mask[start:end]
    if not sel.any():
        raise ProbeError("question span is empty after masking")
    tokens = stack[layer, start:end][sel]
    if pool == "mean":
        return tokens.mean(axis=0)
    if pool == "last":
        return tokens[-1]
    raise ProbeError(f"unknown pooling {pool!r}")
