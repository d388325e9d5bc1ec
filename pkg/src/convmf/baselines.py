"""Rating-only comparison models: the training-mean Offset predictor and PMF."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OffsetModel:
    mean_rating: float

    def predict(self, user=None, item=None):
        if user is None:
            return self.mean_rating
        return np.full(np.shape(np.atleast_1d(user)), self.mean_rating)


def offset_fit(ratings) -> OffsetModel:
    ratings = np.asarray(ratings, dtype=np.float64)
    if ratings.size == 0:
        raise ValueError("Offset baseline needs at least one training rating")
    return OffsetModel(math.fsum(ratings.tolist()) / ratings.size)


def offset_predict(model: OffsetModel) -> float:
    return model.mean_rating


@dataclass
class PmfConfig:
    n_factors: int = 8
    step_size: float = 0.005
    l2: float = 1e-4
    epochs: int = 100
    batch_size: int = 1
    patience: int = 5
    min_epochs: int = 20
    init_noise: float = 0.01
    seed: int = 0


@dataclass
class PmfParams:
    user_factors: np.ndarray
    item_factors: np.ndarray
    global_mean: float
    l2: float
    history: list = field(default_factory=list)  # (epoch, train_objective, train_rmse, valid_rmse)
    best_epoch: int = 0


def pmf_predict(params: PmfParams, user, item, clamp=False):
    """``mu + u . v``; indices outside the trained matrices predict ``mu``."""
    user = np.atleast_1d(np.asarray(user, dtype=np.int64))
    item = np.atleast_1d(np.asarray(item, dtype=np.int64))
    ku = (user >= 0) & (user < params.user_factors.shape[0])
    ki = (item >= 0) & (item < params.item_factors.shape[0])
    u = np.where(ku[:, None], params.user_factors[np.where(ku, user, 0)], 0.0)
    v = np.where(ki[:, None], params.item_factors[np.where(ki, item, 0)], 0.0)
    pred = params.global_mean + np.einsum("ij,ij->i", u, v)
    return np.clip(pred, 1.0, 5.0) if clamp else pred


def pmf_objective(params: PmfParams, users, items, ratings) -> float:
    err = ratings - pmf_predict(params, users, items)
    reg = params.l2 * (np.sum(params.user_factors**2) + np.sum(params.item_factors**2))
    return float(err @ err + reg)


def _rmse(pred, target) -> float:
    d = pred - target
    return math.sqrt(float(d @ d) / d.size)


def pmf_fit(train, n_users: int, n_items: int, config: PmfConfig = PmfConfig(), valid=None) -> PmfParams:
    """Fit PMF by mini-batch gradient descent on the squared error plus L2.

    ``train`` and ``valid`` are ``(users, items, ratings)`` triples.  With a
    validation set, training stops after ``patience`` epochs without a new
    best validation RMSE and the best factors are returned.
    """
    users, items, ratings = (np.asarray(a) for a in train)
    users = users.astype(np.int64)
    items = items.astype(np.int64)
    ratings = ratings.astype(np.float64)
    if ratings.size == 0:
        raise ValueError("PMF needs at least one training rating")
    rng = np.random.default_rng(config.seed)
    mu = float(ratings.mean())
    U = rng.uniform(-config.init_noise, config.init_noise, size=(n_users, config.n_factors))
    V = rng.uniform(-config.init_noise, config.init_noise, size=(n_items, config.n_factors))
    params = PmfParams(U, V, mu, config.l2)

    def record(epoch):
        obj = pmf_objective(params, users, items, ratings)
        tr = _rmse(pmf_predict(params, users, items), ratings)
        va = None
        if valid is not None:
            va = _rmse(pmf_predict(params, valid[0], valid[1], clamp=True), np.asarray(valid[2], dtype=np.float64))
        if not math.isfinite(obj):
            raise NumericError(f"PMF diverged at epoch {epoch}: objective {obj}, step {config.step_size}")
        params.history.append((epoch, obj, tr, va))
        return va

    best = record(0)
    best_state = (U.copy(), V.copy())
    stale = 0
    lr, lam, bs = config.step_size, config.l2, config.batch_size
    n = ratings.size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        # overflow on divergence is reported by record() as a NumericError
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n, bs):
                b = order[start : start + bs]
                ub, ib = users[b], items[b]
                uf, vf = U[ub], V[ib]
                err = (ratings[b] - mu - np.einsum("ij,ij->i", uf, vf))[:, None]
                gu = -2.0 * err * vf + 2.0 * lam * uf
                gv = -2.0 * err * uf + 2.0 * lam * vf
                np.add.at(U, ub, -lr * gu)
                np.add.at(V, ib, -lr * gv)
            va = record(epoch)
        if va is None:
            continue
        if va < best:
            best, best_state, stale = va, (U.copy(), V.copy()), 0
            params.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience and epoch >= config.min_epochs:
                log.info("PMF early stop at epoch %d (best %d)", epoch, params.best_epoch)
                break
    if valid is not None:
        params.user_factors, params.item_factors = best_state
    else:
        params.best_epoch = params.history[-1][0]
    return params
