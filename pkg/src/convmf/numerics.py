"""Forward and reverse-mode kernels for the convolutional encoder and its loss.

Arrays are float64.  Activation maps are laid out ``(N, F, T)`` where ``T =
L - w + 1`` is the number of valid window positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LN2 = math.log(2.0)
RMSE_EPS = 1e-8


class NumericError(FloatingPointError):
    """A non-finite value appeared in a loss or gradient."""


def conv1d_valid(reviews, filters, bias):
    """Valid 1-D convolution over the token axis.

    reviews: (N, L, D) or (L, D); filters: (F, w, D); bias: (F,).
    Returns activations of shape (N, F, L - w + 1) (or (F, L - w + 1)).
    """
    reviews = np.asarray(reviews, dtype=np.float64)
    single = reviews.ndim == 2
    if single:
        reviews = reviews[None]
    n, L, D = reviews.shape
    F, w, Dw = filters.shape
    if Dw != D:
        raise ValueError(f"filter depth {Dw} does not match embedding dimension {D}")
    if w > L:
        raise ValueError(f"window {w} longer than review length {L}")
    T = L - w + 1
    z = np.zeros((n, T, F))
    for i in range(w):
        z += reviews[:, i : i + T, :] @ filters[:, i, :].T
    z += bias
    out = z.transpose(0, 2, 1)
    return out[0] if single else out


def conv1d_valid_backward(reviews, filters, grad_out, need_input_grad=True):
    """Gradients of :func:`conv1d_valid` for an upstream gradient ``grad_out`` (N, F, T).

    Returns ``(d_filters, d_bias, d_reviews or None)``.
    """
    n, L, D = reviews.shape
    F, w, _ = filters.shape
    T = L - w + 1
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(n * T, F)
    d_filters = np.empty_like(filters)
    for i in range(w):
        d_filters[:, i, :] = g.T @ reviews[:, i : i + T, :].reshape(n * T, D)
    d_bias = g.sum(axis=0)
    d_reviews = None
    if need_input_grad:
        d_reviews = np.zeros_like(reviews)
        g3 = g.reshape(n, T, F)
        for i in range(w):
            d_reviews[:, i : i + T, :] += g3 @ filters[:, i, :]
    return d_filters, d_bias, d_reviews


def max_pool(row):
    """(max value, first index attaining it) of a 1-D activation row."""
    row = np.asarray(row)
    idx = int(np.argmax(row))
    return row[idx], idx


def max_pool_batch(acts):
    """Max over the last axis; ties resolve to the lowest position."""
    idx = np.argmax(acts, axis=-1)
    return np.take_along_axis(acts, idx[..., None], axis=-1)[..., 0], idx


def softmax(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def entropy_bits(p, axis=-1):
    """Shannon entropy in bits, with 0 * log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def softmax_entropy_bits(a, mask=None):
    """Entropy (bits) of softmax over the last axis; ``mask`` selects positions.

    Returns ``(entropy, p)`` where masked-out positions carry p == 0.
    """
    a = np.asarray(a, dtype=np.float64)
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    shift = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shift)
    z = e.sum(axis=-1, keepdims=True)
    p = e / z
    # H = log z - sum p * shift, in nats; finite on masked positions since p == 0 there
    weighted = np.where(p > 0, p * np.where(np.isfinite(shift), shift, 0.0), 0.0).sum(axis=-1)
    h = (np.log(z[..., 0]) - weighted) / LN2
    return np.maximum(h, 0.0), p


def softmax_entropy_grad(a, p):
    """dH/da for H = entropy_bits(softmax(a)), given p = softmax(a).

    dH/da_i = -p_i (a_i - sum_j p_j a_j) / ln 2; masked positions (p == 0) get 0.
    """
    a_safe = np.where(p > 0, a, 0.0)
    mean_a = (p * a_safe).sum(axis=-1, keepdims=True)
    return -p * (a_safe - mean_a) / LN2


def window_mask(true_length, n_positions, window):
    """(N, T) bool mask of the first max(1, true_length - w + 1) windows."""
    valid = np.maximum(np.asarray(true_length) - window + 1, 1)
    return np.arange(n_positions)[None, :] < valid[:, None]


def entropy_regularizer(acts, mask=None):
    """Mean softmax entropy (bits) over every (review, filter) row of ``acts``."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.size == 0:
        raise ValueError("entropy regularizer of an empty batch")
    if mask is not None and mask.ndim == acts.ndim - 1:
        mask = np.broadcast_to(mask[:, None, :], acts.shape)
    h, _ = softmax_entropy_bits(acts, mask)
    return float(h.mean())


def entropy_regularizer_backward(acts, mask=None):
    """(value, d value / d acts) of :func:`entropy_regularizer`."""
    if mask is not None and mask.ndim == acts.ndim - 1:
        mask = np.broadcast_to(mask[:, None, :], acts.shape)
    h, p = softmax_entropy_bits(acts, mask)
    rows = h.size
    return float(h.mean()), softmax_entropy_grad(acts, p) / rows


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    rmse_term: float
    entropy_term_bits: float
    lam: float
    n_reviews: int
    n_factors: int


def rmse(predictions, targets) -> float:
    d = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return math.sqrt(float(np.mean(d * d)))


def rmse_backward(predictions, targets):
    """(rmse, d rmse / d predictions).

    Below RMSE_EPS the chain factor 1 / rmse is frozen at 1 / RMSE_EPS, which
    keeps the MSE subgradient direction with a bounded scale.
    """
    d = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    value = math.sqrt(float(np.mean(d * d)))
    return value, d / (d.size * max(value, RMSE_EPS))


def composite_loss(predictions, targets, reg: float, lam: float, n_reviews: int = 0, n_factors: int = 0):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if len(predictions) != len(targets) or len(predictions) == 0:
        raise ValueError("predictions and targets must be non-empty and of equal length")
    r = rmse(predictions, targets)
    return LossBreakdown(r + lam * reg, r, float(reg), float(lam), int(n_reviews), int(n_factors))


def check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite gradient in {name}")
