"""Finite-difference verification of the ConvMF batch gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as m
from .corpus import PAD


@dataclass
class GradInstance:
    params: m.ModelParams
    table: np.ndarray
    batch: m.ItemBatch
    lam: float
    mask_pad: bool


def random_instance(seed, n_factors=2, dim=3, length=8, window=2, n_users=2, n_items=2, reviews_per_item=2,
                    lam=0.0, frozen=True, mask_pad=False, vocab_size=12, nonlinearity="identity",
                    min_gap=1e-3):
    """A small random batch whose max-pool choices are separated by ``min_gap``.

    Instances with near-tied maxima sit on a kink of the loss, where central
    differences are meaningless; the seed stream is advanced past them.
    """
    rng = np.random.default_rng(seed)
    while True:
        table = rng.normal(size=(vocab_size, dim))
        table[0] = 0.0
        n_rev = n_items * reviews_per_item
        lengths = rng.integers(window, length + 1, size=n_rev)
        tokens = np.zeros((n_rev, length), dtype=np.int64)
        for r, L in enumerate(lengths):
            tokens[r, :L] = rng.integers(1, vocab_size, size=L)
        slots = np.repeat(np.arange(n_items), reviews_per_item)
        params = m.ModelParams(
            user_factors=rng.normal(size=(n_users, n_factors)),
            filters=rng.normal(scale=0.5, size=(n_factors, window, dim)),
            bias=rng.normal(scale=0.1, size=n_factors),
            global_mean=3.0,
            embeddings=None if frozen else table.copy(),
            nonlinearity=nonlinearity,
        )
        n_ratings = n_rev
        batch = m.ItemBatch(
            tokens=tokens,
            true_length=lengths,
            review_slot=slots,
            n_slots=n_items,
            rating_user=rng.integers(0, n_users, size=n_ratings),
            rating_slot=rng.integers(0, n_items, size=n_ratings),
            rating=rng.integers(1, 6, size=n_ratings).astype(np.float64),
        )
        acts, _ = m.encode_reviews(tokens, table, params)
        top2 = np.sort(acts, axis=-1)[..., -2:]
        if np.min(top2[..., 1] - top2[..., 0]) >= min_gap:
            return GradInstance(params, table, batch, lam, mask_pad)


def gradient_check(instance: GradInstance, h: float = 1e-5) -> dict:
    """Max relative error per parameter block, central differences with step ``h``.

    Relative error is ``|g - g_fd| / max(1, |g|, |g_fd|)``.  A frozen
    embedding table contributes no block.
    """
    p, table, batch = instance.params, instance.table, instance.batch
    _, grads = m.batch_loss(p, table, batch, instance.lam, instance.mask_pad)
    report = {}
    for name, g in grads.items():
        arr = getattr(p, name)
        worst = 0.0
        for idx in np.ndindex(arr.shape):
            if name == "embeddings" and idx[0] == PAD:
                continue  # PAD row is frozen by contract
            orig = arr[idx]
            arr[idx] = orig + h
            up = m.batch_loss(p, table, batch, instance.lam, instance.mask_pad, grad=False)[0].total
            arr[idx] = orig - h
            down = m.batch_loss(p, table, batch, instance.lam, instance.mask_pad, grad=False)[0].total
            arr[idx] = orig
            fd = (up - down) / (2 * h)
            err = abs(g[idx] - fd) / max(1.0, abs(g[idx]), abs(fd))
            worst = max(worst, err)
        report[name] = worst
    return report
