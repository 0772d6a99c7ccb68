"""Pair-feature similarity: difference/product layers, the learned hybrid
score, the pair-classification objective, and fixed-matrix baseline metrics.

Feature pairs are (n, d) matrices; weights are length-d vectors. The hybrid
score of a pair is

    score = w_d . |x1 - x2| + w_m . (x1 * x2)

where larger means more similar. The objective treats each pair as a single
binary sample with label +1 (same identity) or -1.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _check_pair(x1, x2):
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ShapeError(f"feature shapes differ: {x1.shape} vs {x2.shape}")
    return x1, x2


def diff_forward(x1, x2):
    """Element-wise absolute difference |x1 - x2|."""
    x1, x2 = _check_pair(x1, x2)
    return np.abs(x1 - x2)


def diff_backward(x1, x2, grad_diff):
    """Backward of the absolute difference.

    The per-element derivative w.r.t. x1 is +1 where x1 > x2, 0 at equality,
    and -1 otherwise; the derivative w.r.t. x2 is its negation.
    """
    x1, x2 = _check_pair(x1, x2)
    sign = np.sign(x1 - x2)
    g1 = grad_diff * sign
    return g1, -g1


def mult_forward(x1, x2):
    """Element-wise product x1 * x2."""
    x1, x2 = _check_pair(x1, x2)
    return x1 * x2


def mult_backward(x1, x2, grad_mult):
    """Backward of the element-wise product: (grad * x2, grad * x1)."""
    x1, x2 = _check_pair(x1, x2)
    return grad_mult * x2, grad_mult * x1


def hybrid_score(w_d, w_m, x1, x2):
    """Learned similarity score(s) of one pair or a batch of pairs."""
    x1, x2 = _check_pair(x1, x2)
    w_d = np.asarray(w_d)
    w_m = np.asarray(w_m)
    if x1.shape[-1] != w_d.shape[0] or w_d.shape != w_m.shape:
        raise ShapeError(
            f"weight dims {w_d.shape}/{w_m.shape} do not match features "
            f"{x1.shape}"
        )
    return diff_forward(x1, x2) @ w_d + mult_forward(x1, x2) @ w_m


def softplus(t):
    """log(1 + exp(t)) computed as max(t,0) + log1p(exp(-|t|)); overflow-safe."""
    t = np.asarray(t)
    return np.maximum(t, 0) + np.log1p(np.exp(-np.abs(t)))


def sigmoid(t):
    t = np.asarray(t)
    out = np.empty_like(t, dtype=np.result_type(t, np.float32))
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_loss(w, z, y, alpha):
    """Mean log-logistic pair loss with L2 penalty on the projection vector.

    loss = (1/K) sum_k log(1 + exp(-y_k w.z_k)) + (alpha/2)||w||^2

    w: (2d,); z: (K, 2d) integration features [diff, mult]; y: (K,) in {-1,+1}.
    Returns (loss, grad_w, grad_z) where grad_z has shape (K, 2d) and already
    carries the 1/K factor.
    """
    w = np.asarray(w)
    z = np.asarray(z)
    y = np.asarray(y)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"z must be a non-empty (K, 2d) matrix, got {z.shape}")
    if z.shape[1] != w.shape[0]:
        raise ShapeError(f"w dim {w.shape} does not match z {z.shape}")
    if y.shape != (z.shape[0],):
        raise ShapeError(f"labels {y.shape} do not match batch {z.shape}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("labels must be +1 or -1")

    k = z.shape[0]
    margin = y * (z @ w)
    loss = softplus(-margin).mean() + 0.5 * alpha * (w @ w)
    # d/ds log(1+exp(-y s)) = -y * sigmoid(-y s)
    dmargin = (-y * sigmoid(-margin)) / k
    grad_w = z.T @ dmargin + alpha * w
    grad_z = dmargin[:, None] * w[None, :]
    return float(loss), grad_w, grad_z


def euclidean_score(x1, x2):
    """Squared Euclidean distance (a dissimilarity: smaller = more similar)."""
    x1, x2 = _check_pair(x1, x2)
    d = x1 - x2
    return np.einsum("...i,...i->...", d, d)


def mahalanobis_score(m, x1, x2):
    """Quadratic-form distance (x1-x2)^T M (x1-x2) under a fixed matrix."""
    x1, x2 = _check_pair(x1, x2)
    m = np.asarray(m)
    d = x1 - x2
    if m.shape != (x1.shape[-1], x1.shape[-1]):
        raise ShapeError(f"matrix {m.shape} does not match features {x1.shape}")
    return np.einsum("...i,ij,...j->...", d, m, d)


def cosine_score(x1, x2, tol=1e-6):
    """Inner product of l2-normalized features; callers must pre-normalize."""
    x1, x2 = _check_pair(x1, x2)
    n1 = np.linalg.norm(x1, axis=-1)
    n2 = np.linalg.norm(x2, axis=-1)
    if np.any(np.abs(n1 - 1) > tol) or np.any(np.abs(n2 - 1) > tol):
        raise ValueError("cosine_score requires l2-normalized inputs")
    return np.einsum("...i,...i->...", x1, x2)


def count_metric_params(kind, d):
    """Learnable-parameter count of each similarity metric at feature dim d."""
    if d < 1:
        raise ValueError(f"feature dim must be >= 1, got {d}")
    counts = {
        "mahalanobis": d * d,
        "euclidean": 0,
        "cosine": 0,
        "hybrid": 2 * d,
    }
    try:
        return counts[kind]
    except KeyError:
        raise ValueError(f"unknown metric kind: {kind!r}") from None
