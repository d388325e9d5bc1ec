"""Convolutional matrix factorization.

Each training review is encoded by a bank of ``F`` convolution filters
followed by a max over window positions; an item's embedding is the mean of
its training-review encodings.  Users carry free ``F``-dimensional factors and
a rating is predicted as ``mu + user . item``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .corpus import PAD, Corpus, TRAIN

CHECKPOINT_FORMAT = "convmf-checkpoint"
CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


class CheckpointMismatch(Exception):
    """Checkpoint does not belong to the corpus or embeddings it is used with."""


@dataclass
class ModelParams:
    user_factors: np.ndarray  # (n_users, F)
    filters: np.ndarray  # (F, w, D)
    bias: np.ndarray  # (F,)
    global_mean: float
    embeddings: np.ndarray | None = None  # fine-tuned copy; None when frozen
    nonlinearity: str = "identity"
    config: dict = field(default_factory=dict)
    version: int = 0

    @property
    def n_factors(self) -> int:
        return self.filters.shape[0]

    @property
    def window(self) -> int:
        return self.filters.shape[1]

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.user_factors.copy(),
            self.filters.copy(),
            self.bias.copy(),
            self.global_mean,
            None if self.embeddings is None else self.embeddings.copy(),
            self.nonlinearity,
            dict(self.config),
            self.version,
        )


def init_params(n_users, n_factors, window, dim, global_mean, rng, active_users=None, scale=0.1, nonlinearity="identity"):
    """Uniform(-scale, scale) filters and user factors; zero biases.

    Users outside ``active_users`` (no training ratings) start at zero so
    they predict the global mean.
    """
    filters = rng.uniform(-scale, scale, size=(n_factors, window, dim))
    users = rng.uniform(-scale, scale, size=(n_users, n_factors))
    if active_users is not None:
        cold = np.ones(n_users, dtype=bool)
        cold[active_users] = False
        users[cold] = 0.0
    return ModelParams(users, filters, np.zeros(n_factors), float(global_mean), nonlinearity=nonlinearity)


def _activate(z, nonlinearity):
    if nonlinearity == "identity":
        return z
    if nonlinearity == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown nonlinearity {nonlinearity!r}")


def encode_reviews(tokens, embedding_matrix, params: ModelParams):
    """Activation maps (N, F, T) and pooled encodings (N, F) for token rows."""
    x = embedding_matrix[tokens]
    acts = _activate(nx.conv1d_valid(x, params.filters, params.bias), params.nonlinearity)
    pooled, _ = nx.max_pool_batch(acts)
    return acts, pooled


def review_embedding(tokens, embedding_matrix, params: ModelParams):
    """(F-vector, ActivationMap (F, T)) for a single review's token row."""
    acts, pooled = encode_reviews(np.asarray(tokens)[None], embedding_matrix, params)
    return pooled[0], acts[0]


def item_embedding(review_tokens, embedding_matrix, params: ModelParams):
    """Mean review encoding; zero vector for an item with no training reviews."""
    if len(review_tokens) == 0:
        return np.zeros(params.n_factors)
    _, pooled = encode_reviews(np.asarray(review_tokens), embedding_matrix, params)
    return pooled.mean(axis=0)


def embedding_matrix_for(params: ModelParams, table_matrix):
    return table_matrix if params.embeddings is None else params.embeddings


# ---------------------------------------------------------------------------
# batches and the differentiable batch loss


@dataclass
class ItemBatch:
    """All inputs one item-batch needs: reviews to encode and ratings to fit."""

    tokens: np.ndarray  # (N, L)
    true_length: np.ndarray  # (N,)
    review_slot: np.ndarray  # (N,) batch-local item slot
    n_slots: int
    rating_user: np.ndarray  # (n,)
    rating_slot: np.ndarray  # (n,)
    rating: np.ndarray  # (n,)

    @property
    def n_reviews(self) -> int:
        return len(self.review_slot)


def make_item_batch(corpus: Corpus, items, item_rows, review_cap=None, rng=None) -> ItemBatch:
    """Batch of ``items``: their training reviews feed the encoder, their training ratings the loss.

    ``item_rows`` is :meth:`Corpus.item_train_rows`.  With ``review_cap`` an
    item contributes at most that many reviews to the encoder, sampled by
    ``rng``; all its training ratings still enter the loss.
    """
    review_rows, slots, rating_rows, rating_slots = [], [], [], []
    for s, j in enumerate(items):
        rows = item_rows[j]
        rating_rows.append(rows)
        rating_slots.append(np.full(len(rows), s, dtype=np.int64))
        if review_cap is not None and len(rows) > review_cap:
            rows = np.sort(rng.choice(rows, size=review_cap, replace=False))
        review_rows.append(rows)
        slots.append(np.full(len(rows), s, dtype=np.int64))
    rr = np.concatenate(review_rows)
    kr = np.concatenate(rating_rows)
    return ItemBatch(
        tokens=corpus.tokens[rr],
        true_length=corpus.true_length[rr],
        review_slot=np.concatenate(slots),
        n_slots=len(items),
        rating_user=corpus.user_index[kr].astype(np.int64),
        rating_slot=np.concatenate(rating_slots),
        rating=corpus.rating[kr],
    )


@dataclass
class Gradients:
    user_factors: np.ndarray
    filters: np.ndarray
    bias: np.ndarray
    embeddings: np.ndarray | None = None

    def items(self):
        out = [("user_factors", self.user_factors), ("filters", self.filters), ("bias", self.bias)]
        if self.embeddings is not None:
            out.append(("embeddings", self.embeddings))
        return out


def batch_loss(params: ModelParams, table_matrix, batch: ItemBatch, lam: float, mask_pad=False, grad=True):
    """Entropy-regularized RMSE of one item batch and, optionally, its exact gradients.

    Item encodings are recomputed from the batch's reviews so that gradients
    reach the filters.  Returns ``(LossBreakdown, Gradients | None)``.
    """
    emb = embedding_matrix_for(params, table_matrix)
    x = emb[batch.tokens]
    z = nx.conv1d_valid(x, params.filters, params.bias)
    acts = _activate(z, params.nonlinearity)
    pooled, arg = nx.max_pool_batch(acts)

    counts = np.bincount(batch.review_slot, minlength=batch.n_slots).astype(np.float64)
    items = np.zeros((batch.n_slots, params.n_factors))
    np.add.at(items, batch.review_slot, pooled)
    items /= np.maximum(counts, 1.0)[:, None]

    u = params.user_factors[batch.rating_user]
    v = items[batch.rating_slot]
    pred = params.global_mean + np.einsum("ij,ij->i", u, v)
    rmse_value, d_pred = nx.rmse_backward(pred, batch.rating)

    T = acts.shape[-1]
    mask = nx.window_mask(batch.true_length, T, params.window) if mask_pad else None
    reg, d_acts_reg = nx.entropy_regularizer_backward(acts, mask)
    loss = nx.LossBreakdown(rmse_value + lam * reg, rmse_value, reg, float(lam), batch.n_reviews, params.n_factors)
    if not grad:
        return loss, None

    d_users = np.zeros_like(params.user_factors)
    np.add.at(d_users, batch.rating_user, d_pred[:, None] * v)
    d_items = np.zeros_like(items)
    np.add.at(d_items, batch.rating_slot, d_pred[:, None] * u)
    d_pooled = d_items[batch.review_slot] / counts[batch.review_slot][:, None]

    d_acts = lam * d_acts_reg if lam else np.zeros_like(acts)
    n_idx = np.arange(acts.shape[0])[:, None]
    f_idx = np.arange(acts.shape[1])[None, :]
    d_acts[n_idx, f_idx, arg] += d_pooled
    if params.nonlinearity == "tanh":
        d_acts = d_acts * (1.0 - acts * acts)

    need_x = params.embeddings is not None
    d_filters, d_bias, d_x = nx.conv1d_valid_backward(x, params.filters, d_acts, need_input_grad=need_x)
    d_emb = None
    if need_x:
        d_emb = np.zeros_like(params.embeddings)
        np.add.at(d_emb, batch.tokens.ravel(), d_x.reshape(-1, d_x.shape[-1]))
        d_emb[PAD] = 0.0
    grads = Gradients(d_users, d_filters, d_bias, d_emb)
    for name, g in grads.items():
        nx.check_finite(name, g)
    return loss, grads


# ---------------------------------------------------------------------------
# evaluation-time item cache and prediction


@dataclass
class ItemEmbeddingCache:
    vectors: np.ndarray  # (n_items, F); zero rows for cold items
    review_counts: np.ndarray  # (n_items,)
    stamp: int


def build_item_cache(params: ModelParams, table_matrix, corpus: Corpus, chunk: int = 2048) -> ItemEmbeddingCache:
    """Encode every training review once and average per item."""
    emb = embedding_matrix_for(params, table_matrix)
    rows = corpus.rows(TRAIN)
    sums = np.zeros((corpus.n_items, params.n_factors))
    for start in range(0, len(rows), chunk):
        part = rows[start : start + chunk]
        _, pooled = encode_reviews(corpus.tokens[part], emb, params)
        np.add.at(sums, corpus.item_index[part], pooled)
    counts = np.bincount(corpus.item_index[rows], minlength=corpus.n_items)
    vectors = sums / np.maximum(counts, 1)[:, None]
    return ItemEmbeddingCache(vectors, counts, params.version)


def predict_rating(user, item, params: ModelParams, cache: ItemEmbeddingCache, clamp=False):
    """Vectorised ``mu + u . v``; out-of-range user/item indices fall back to the mean."""
    if cache.stamp != params.version:
        raise StaleCacheError(f"item cache built at version {cache.stamp}, params at {params.version}")
    user = np.atleast_1d(np.asarray(user, dtype=np.int64))
    item = np.atleast_1d(np.asarray(item, dtype=np.int64))
    known_u = (user >= 0) & (user < params.user_factors.shape[0])
    known_i = (item >= 0) & (item < cache.vectors.shape[0])
    u = np.where(known_u[:, None], params.user_factors[np.where(known_u, user, 0)], 0.0)
    v = np.where(known_i[:, None], cache.vectors[np.where(known_i, item, 0)], 0.0)
    pred = params.global_mean + np.einsum("ij,ij->i", u, v)
    return np.clip(pred, 1.0, 5.0) if clamp else pred


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(a):
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _decode_array(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path, kind: str, arrays: dict, meta: dict) -> None:
    """Write a JSON checkpoint; key order and float repr keep it byte-stable."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": {k: _encode_array(np.asarray(v, dtype=np.float64)) for k, v in arrays.items() if v is not None},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    return doc["kind"], {k: _decode_array(v) for k, v in doc["arrays"].items()}, doc["meta"]


def verify_checkpoint(meta: dict, vocab_hash: str | None = None, embedding_source: str | None = None):
    if vocab_hash is not None and meta.get("vocab_hash") != vocab_hash:
        raise CheckpointMismatch(f"vocabulary hash mismatch: checkpoint {meta.get('vocab_hash')} vs corpus {vocab_hash}")
    if embedding_source is not None and meta.get("embedding_source") not in (None, embedding_source):
        raise CheckpointMismatch(
            f"embedding source mismatch: checkpoint {meta.get('embedding_source')} vs {embedding_source}"
        )


def save_model(path, params: ModelParams, vocab_hash: str, embedding_source: str) -> None:
    meta = {
        "vocab_hash": vocab_hash,
        "embedding_source": embedding_source,
        "global_mean": params.global_mean,
        "nonlinearity": params.nonlinearity,
        "config": params.config,
    }
    arrays = {
        "user_factors": params.user_factors,
        "filters": params.filters,
        "bias": params.bias,
        "embeddings": params.embeddings,
    }
    save_checkpoint(path, "convmf", arrays, meta)


def load_model(path, vocab_hash: str | None = None, embedding_source: str | None = None) -> ModelParams:
    kind, arrays, meta = load_checkpoint(path)
    if kind != "convmf":
        raise CheckpointMismatch(f"{path} holds a {kind!r} model, not convmf")
    verify_checkpoint(meta, vocab_hash, embedding_source)
    return ModelParams(
        arrays["user_factors"],
        arrays["filters"],
        arrays["bias"],
        float(meta["global_mean"]),
        arrays.get("embeddings"),
        meta.get("nonlinearity", "identity"),
        meta.get("config", {}),
    )
