"""Item-batched training loop for ConvMF, RMSE evaluation and the lambda x F grid."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as m
from .baselines import OffsetModel, PmfConfig, PmfParams, offset_fit, pmf_fit, pmf_predict
from .corpus import TEST, TRAIN, VALID, Corpus
from .embeddings import EmbeddingTable
from .numerics import NumericError

log = logging.getLogger(__name__)

PAPER_FACTORS = (6, 8, 10, 12)
PAPER_LAMBDAS = (0.0, 0.4, 0.8, 1.2, 1.6, 2.0)

# provenance of each TrainConfig field: fixed by the paper, or chosen here
PAPER_FIXED = "paper-fixed"
ARTIFACT_DEFAULT = "artifact-default"
USER_SET = "user-set"


@dataclass
class TrainConfig:
    n_factors: int = 8
    lam: float = 0.0
    window: int = 5
    review_length: int = 64
    batch_size: int = 16
    epochs: int = 50
    step_size: float = 5e-3
    weight_decay: float = 1e-3
    seed: int = 0
    mask_pad: bool = False
    freeze_embeddings: bool = True
    patience: int = 5
    min_epochs: int = 20
    review_cap: int | None = None
    center: bool = True
    nonlinearity: str = "identity"
    init_scale: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.n_factors < 1:
            raise ValueError("n_factors must be >= 1")
        if self.window > self.review_length:
            raise ValueError("window longer than review length")

    def provenance(self, user_set=()) -> dict:
        paper = {"window", "review_length"}
        if self.n_factors in PAPER_FACTORS:
            paper.add("n_factors")
        if self.lam in PAPER_LAMBDAS:
            paper.add("lam")
        out = {}
        for f in fields(self):
            if f.name in user_set:
                out[f.name] = USER_SET
            elif f.name in paper:
                out[f.name] = PAPER_FIXED
            else:
                out[f.name] = ARTIFACT_DEFAULT
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_total: float
    train_rmse: float
    train_entropy_bits: float
    val_rmse: float
    seconds: float


@dataclass
class RunHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    lam: float = 0.0

    def best(self) -> EpochRecord:
        return next(r for r in self.epochs if r.epoch == self.best_epoch)

    def final(self) -> EpochRecord:
        return self.epochs[-1]

    def metrics_csv(self) -> str:
        """Deterministic per-epoch metrics (wall time lives in :meth:`timing_csv`)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_total", "train_rmse", "train_entropy_bits", "val_rmse"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.train_total), repr(r.train_rmse), repr(r.train_entropy_bits), repr(r.val_rmse)])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for r in self.epochs:
            w.writerow([r.epoch, f"{r.seconds:.3f}"])
        return buf.getvalue()


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, step_size=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step_size, self.beta1, self.beta2, self.eps = step_size, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            mt, vt = self.m[name], self.v[name]
            mt *= self.beta1
            mt += (1.0 - self.beta1) * g
            vt *= self.beta2
            vt += (1.0 - self.beta2) * g * g
            p -= self.step_size * (mt / c1) / (np.sqrt(vt / c2) + self.eps)


def _param_views(params: m.ModelParams) -> dict:
    d = {"user_factors": params.user_factors, "filters": params.filters, "bias": params.bias}
    if params.embeddings is not None:
        d["embeddings"] = params.embeddings
    return d


def rmse_of(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0:
        raise ValueError("RMSE of an empty split")
    d = pred - target
    # correctly rounded sum: the value does not depend on summation order
    return math.sqrt(math.fsum((d * d).tolist()) / d.size)


def convmf_split_rmse(params, table_matrix, corpus: Corpus, split, cache=None) -> float:
    rows = corpus.rows(split)
    if len(rows) == 0:
        raise ValueError(f"split {split!r} is empty")
    if cache is None:
        cache = m.build_item_cache(params, table_matrix, corpus)
    pred = m.predict_rating(corpus.user_index[rows], corpus.item_index[rows], params, cache, clamp=True)
    return rmse_of(pred, corpus.rating[rows])


def evaluate_rmse(kind: str, model, corpus: Corpus, split="test", table_matrix=None) -> float:
    """Clamped RMSE of a fitted model on a split.

    ``kind`` is ``"offset"`` (model: OffsetModel), ``"pmf"`` (PmfParams) or
    ``"convmf"`` (ModelParams, with ``table_matrix`` supplying input vectors).
    """
    rows = corpus.rows(split)
    if len(rows) == 0:
        raise ValueError(f"split {split!r} is empty")
    target = corpus.rating[rows]
    if kind == "offset":
        pred = np.clip(np.full(len(rows), model.mean_rating), 1.0, 5.0)
    elif kind == "pmf":
        pred = pmf_predict(model, corpus.user_index[rows], corpus.item_index[rows], clamp=True)
    elif kind == "convmf":
        return convmf_split_rmse(model, table_matrix, corpus, split)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return rmse_of(pred, target)


def fit_offset(corpus: Corpus) -> OffsetModel:
    return offset_fit(corpus.rating[corpus.rows(TRAIN)])


def fit_pmf(corpus: Corpus, config: PmfConfig) -> PmfParams:
    def triple(split):
        rows = corpus.rows(split)
        return corpus.user_index[rows], corpus.item_index[rows], corpus.rating[rows]

    valid = triple(VALID) if len(corpus.rows(VALID)) else None
    return pmf_fit(triple(TRAIN), corpus.n_users, corpus.n_items, config, valid=valid)


def _full_pass_loss(params, table_matrix, corpus, batches, lam, mask_pad):
    """Review-weighted mean loss components over batches, without updating."""
    tot = rm = ent = 0.0
    weight = 0
    for batch in batches:
        loss, _ = m.batch_loss(params, table_matrix, batch, lam, mask_pad, grad=False)
        k = batch.n_reviews
        tot += loss.total * k
        rm += loss.rmse_term * k
        ent += loss.entropy_term_bits * k
        weight += k
    return tot / weight, rm / weight, ent / weight


def train_convmf(config: TrainConfig, corpus: Corpus, table: EmbeddingTable, on_epoch=None):
    """Train ConvMF and return ``(best_params, history)``.

    Batches are groups of ``batch_size`` items; each contributes all of its
    training ratings to the RMSE and all of its training reviews (or a
    seeded sample of ``review_cap`` of them) to the encoder and to the
    entropy term.  The returned parameters are those of the epoch with the
    lowest validation RMSE (epoch 0 is the initialisation).
    """
    if config.review_length != corpus.review_length:
        raise ValueError(f"corpus review length {corpus.review_length} != config {config.review_length}")
    rng = np.random.default_rng(config.seed)
    train_rows = corpus.rows(TRAIN)
    mu = corpus.train_mean() if config.center else 0.0
    params = m.init_params(
        corpus.n_users,
        config.n_factors,
        config.window,
        table.dim,
        mu,
        rng,
        active_users=np.unique(corpus.user_index[train_rows]),
        scale=config.init_scale,
        nonlinearity=config.nonlinearity,
    )
    if not config.freeze_embeddings:
        params.embeddings = table.matrix.copy()
    params.config = asdict(config)

    item_rows = corpus.item_train_rows()
    active_items = np.array([j for j, r in enumerate(item_rows) if len(r)], dtype=np.int64)
    has_valid = len(corpus.rows(VALID)) > 0
    split_for_val = VALID if has_valid else TRAIN

    def batches_for(order):
        for start in range(0, len(order), config.batch_size):
            yield m.make_item_batch(corpus, order[start : start + config.batch_size], item_rows, config.review_cap, rng)

    history = RunHistory(lam=config.lam)
    t0 = time.perf_counter()
    init_batches = list(batches_for(active_items))
    tot, rm, ent = _full_pass_loss(params, table.matrix, corpus, init_batches, config.lam, config.mask_pad)
    del init_batches
    val = convmf_split_rmse(params, table.matrix, corpus, split_for_val)
    history.epochs.append(EpochRecord(0, tot, rm, ent, val, time.perf_counter() - t0))
    if on_epoch:
        on_epoch(history.epochs[-1])
    best_val, best_params, stale = val, params.copy(), 0

    opt = Adam(config.step_size)
    views = _param_views(params)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(active_items)
        tot = rm = ent = 0.0
        weight = 0
        for batch in batches_for(order):
            loss, grads = m.batch_loss(params, table.matrix, batch, config.lam, config.mask_pad)
            if not math.isfinite(loss.total):
                err = NumericError(f"non-finite loss at epoch {epoch}")
                best_params.version = 0
                err.checkpoint, err.history = best_params, history  # last good state for the caller
                raise err
            g = dict(grads.items())
            if config.weight_decay:
                g["user_factors"] = g["user_factors"] + config.weight_decay * params.user_factors
                g["filters"] = g["filters"] + config.weight_decay * params.filters
            opt.step(views, g)
            params.bump()
            k = batch.n_reviews
            tot += loss.total * k
            rm += loss.rmse_term * k
            ent += loss.entropy_term_bits * k
            weight += k
        val = convmf_split_rmse(params, table.matrix, corpus, split_for_val)
        rec = EpochRecord(epoch, tot / weight, rm / weight, ent / weight, val, time.perf_counter() - t0)
        history.epochs.append(rec)
        if on_epoch:
            on_epoch(rec)
        log.info("epoch %d loss %.4f rmse %.4f H %.4f val %.4f", epoch, rec.train_total, rec.train_rmse,
                 rec.train_entropy_bits, val)
        if val < best_val:
            best_val, best_params, stale = val, params.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= config.patience and epoch >= config.min_epochs:
                break
    best_params.version = 0
    return best_params, history


@dataclass
class GridCell:
    lam: float
    n_factors: int
    seed: int
    status: str = "ok"
    rmse: float | None = None
    coherence: float | None = None
    final_entropy_bits: float | None = None
    best_epoch: int | None = None
    error: str | None = None


def run_grid(template: TrainConfig, lambdas, factors, corpus: Corpus, table: EmbeddingTable, top_k=10,
             count_floor=5, on_cell=None):
    """One ConvMF run per (lambda, n_factors) cell with the template's seed.

    Each cell reports test RMSE and mean topic coherence of its best
    checkpoint.  A failing cell is recorded with its error and the grid
    continues.
    """
    from . import topics

    lambdas, factors = list(lambdas), list(factors)
    if not lambdas or not factors:
        raise ValueError("grid needs at least one lambda and one factor count")
    cells = []
    for f in factors:
        for lam in lambdas:
            cell = GridCell(float(lam), int(f), template.seed)
            try:
                cfg = TrainConfig(**{**asdict(template), "lam": float(lam), "n_factors": int(f)})
                params, hist = train_convmf(cfg, corpus, table)
                cell.rmse = convmf_split_rmse(params, table.matrix, corpus, TEST)
                report = topics.topic_report(params, corpus, table, k=top_k, count_floor=count_floor)
                cell.coherence = report.overall_coherence
                cell.final_entropy_bits = hist.final().train_entropy_bits
                cell.best_epoch = hist.best_epoch
            except (NumericError, ValueError, FloatingPointError) as exc:
                cell.status = "failed"
                cell.error = f"{type(exc).__name__}: {exc}"
                log.error("grid cell lambda=%s F=%s failed: %s", lam, f, exc)
            cells.append(cell)
            if on_cell:
                on_cell(cell)
    return grid_table(cells)


def grid_table(cells) -> dict:
    def table(attr):
        out = {}
        for c in cells:
            out.setdefault(str(c.n_factors), {})[repr(c.lam)] = getattr(c, attr)
        return out

    return {
        "cells": [asdict(c) for c in cells],
        "rmse": table("rmse"),
        "coherence": table("coherence"),
    }


def save_pmf(path, params: PmfParams, vocab_hash: str, config: PmfConfig) -> None:
    meta = {"vocab_hash": vocab_hash, "global_mean": params.global_mean, "l2": params.l2,
            "best_epoch": params.best_epoch, "config": asdict(config)}
    m.save_checkpoint(path, "pmf", {"user_factors": params.user_factors, "item_factors": params.item_factors}, meta)


def load_pmf(path, vocab_hash: str | None = None) -> PmfParams:
    kind, arrays, meta = m.load_checkpoint(path)
    if kind != "pmf":
        raise m.CheckpointMismatch(f"{path} holds a {kind!r} model, not pmf")
    m.verify_checkpoint(meta, vocab_hash)
    return PmfParams(arrays["user_factors"], arrays["item_factors"], float(meta["global_mean"]), float(meta["l2"]),
                     best_epoch=int(meta["best_epoch"]))


def pmf_metrics_csv(params: PmfParams) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_objective", "train_rmse", "val_rmse"])
    for epoch, obj, tr, va in params.history:
        w.writerow([epoch, repr(obj), repr(tr), "" if va is None else repr(va)])
    return buf.getvalue()
