"""Topic keywords per latent factor and their embedding coherence.

After training, every training review is run through the filters.  Each
window activation is split evenly over the ``w`` words of its window; a
word's score for a factor is its mean received activation.  The top-k
words per factor form that factor's topic.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as m
from .corpus import PAD, TRAIN, UNK, Corpus
from .embeddings import EmbeddingTable, UndefinedSimilarity, cosine_similarity

log = logging.getLogger(__name__)


class UndefinedCoherence(ValueError):
    pass


@dataclass
class WordActivationStats:
    sums: np.ndarray  # (F, V) accumulated activation mass
    counts: np.ndarray  # (V,) window memberships (identical for every factor)
    occurrences: np.ndarray  # (V,) token occurrences in non-PAD positions
    window: int

    def means(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)


def redistribute(acts, window: int, length: int):
    """Spread each window activation evenly over its words.

    acts: (..., T) with T = length - window + 1.  Returns ``(mass, members)``
    where ``mass[..., p]`` is the activation received by position ``p`` and
    ``members[p]`` the number of windows covering ``p``.
    """
    acts = np.asarray(acts, dtype=np.float64)
    T = acts.shape[-1]
    if T != length - window + 1:
        raise ValueError("activation length does not match review length and window")
    mass = np.zeros(acts.shape[:-1] + (length,))
    share = acts / window
    for i in range(window):
        mass[..., i : i + T] += share
    members = np.zeros(length, dtype=np.int64)
    for i in range(window):
        members[i : i + T] += 1
    return mass, members


def accumulate_word_activations(params: m.ModelParams, corpus: Corpus, table_matrix, chunk: int = 1024,
                                rows=None) -> WordActivationStats:
    """Sweep training reviews (or ``rows``) and accumulate per-word activation mass."""
    if rows is None:
        rows = corpus.rows(TRAIN)
    emb = m.embedding_matrix_for(params, table_matrix)
    V = len(corpus.vocab)
    F, w = params.n_factors, params.window
    L = corpus.review_length
    sums = np.zeros((F, V))
    counts = np.zeros(V, dtype=np.int64)
    occ = np.zeros(V, dtype=np.int64)
    for start in range(0, len(rows), chunk):
        part = rows[start : start + chunk]
        tokens = corpus.tokens[part]
        acts, _ = m.encode_reviews(tokens, emb, params)
        mass, members = redistribute(acts, w, L)
        keep = (tokens != PAD) & (tokens != UNK)
        tok = tokens[keep]
        # mass (n, F, L) -> per kept position (k, F)
        kept_mass = mass.transpose(0, 2, 1)[keep]
        for f in range(F):
            sums[f] += np.bincount(tok, weights=kept_mass[:, f], minlength=V)
        counts += np.bincount(tok, weights=np.broadcast_to(members, tokens.shape)[keep], minlength=V).astype(np.int64)
        occ += np.bincount(tok, minlength=V)
    return WordActivationStats(sums, counts, occ, w)


def top_k_keywords(stats: WordActivationStats, factor: int, k: int = 10, count_floor: int = 5,
                   absolute: bool = False, vocab=None):
    """Top-k token indices by mean activation, best first.

    Tokens seen fewer than ``count_floor`` times are ineligible; ties break
    lexicographically by token when ``vocab`` is given, else by index.
    """
    if k < 1:
        raise ValueError("k must be positive")
    means = stats.means()[factor]
    eligible = np.flatnonzero((stats.occurrences >= count_floor) & np.isfinite(means))
    scores = np.abs(means[eligible]) if absolute else means[eligible]
    if vocab is not None:
        keyed = sorted(zip(eligible.tolist(), scores.tolist()), key=lambda t: (-t[1], vocab.token_of(t[0])))
    else:
        keyed = sorted(zip(eligible.tolist(), scores.tolist()), key=lambda t: (-t[1], t[0]))
    if len(keyed) < k:
        log.warning("factor %d: only %d eligible keywords (k=%d)", factor, len(keyed), k)
    return [i for i, _ in keyed[:k]]


def topic_coherence(keyword_ids, table: EmbeddingTable):
    """Mean pairwise cosine of keywords with pretrained vectors.

    Returns ``(coherence, skipped_pairs)``.  Raises UndefinedCoherence when
    no pair is usable.
    """
    sims = []
    skipped = 0
    for a, b in itertools.combinations(keyword_ids, 2):
        if not (table.pretrained[a] and table.pretrained[b]):
            skipped += 1
            continue
        try:
            sims.append(cosine_similarity(table.matrix[a], table.matrix[b]))
        except UndefinedSimilarity:
            skipped += 1
    if not sims:
        raise UndefinedCoherence("fewer than two keywords with usable pretrained vectors")
    return math.fsum(sims) / len(sims), skipped


@dataclass
class FactorTopic:
    index: int
    keywords: list  # [(token, mean_activation, count)]
    coherence: float | None
    skipped_pairs: int = 0
    excluded: bool = False


@dataclass
class TopicReport:
    factors: list[FactorTopic]
    overall_coherence: float | None
    skipped_pairs: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "factors": [
                {
                    "index": t.index,
                    "coherence": t.coherence,
                    "excluded": t.excluded,
                    "skipped_pairs": t.skipped_pairs,
                    "keywords": [{"token": tok, "mean_activation": a, "count": c} for tok, a, c in t.keywords],
                }
                for t in self.factors
            ],
            "overall_coherence": self.overall_coherence,
            "skipped_pairs": self.skipped_pairs,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_report(stats: WordActivationStats, vocab, table: EmbeddingTable, k=10, count_floor=5,
                 absolute=False, config=None) -> TopicReport:
    means = stats.means()
    topics = []
    for f in range(stats.sums.shape[0]):
        ids = top_k_keywords(stats, f, k, count_floor, absolute, vocab)
        kw = [(vocab.token_of(i), float(means[f, i]), int(stats.counts[i])) for i in ids]
        try:
            coh, skipped = topic_coherence(ids, table)
            topics.append(FactorTopic(f, kw, coh, skipped))
        except UndefinedCoherence:
            n_pairs = len(ids) * (len(ids) - 1) // 2
            topics.append(FactorTopic(f, kw, None, n_pairs, excluded=True))
            log.warning("factor %d excluded from coherence: too few pretrained keywords", f)
    return finalize_report(topics, config)


def finalize_report(topics, config=None) -> TopicReport:
    """Order factors by coherence (excluded last) and compute the overall mean."""
    usable = [t.coherence for t in topics if not t.excluded]
    overall = math.fsum(usable) / len(usable) if usable else None
    ordered = sorted(topics, key=lambda t: (t.excluded, -(t.coherence or 0.0), t.index))
    return TopicReport(ordered, overall, sum(t.skipped_pairs for t in topics), dict(config or {}))


def topic_report(params: m.ModelParams, corpus: Corpus, table: EmbeddingTable, k=10, count_floor=5,
                 absolute=False) -> TopicReport:
    stats = accumulate_word_activations(params, corpus, table.matrix)
    cfg = {"k": k, "count_floor": count_floor, "absolute": absolute,
           "n_factors": params.n_factors, "lam": params.config.get("lam")}
    return build_report(stats, corpus.vocab, table, k, count_floor, absolute, cfg)


def rescore_report(report: dict, vocab, table: EmbeddingTable) -> TopicReport:
    """Recompute coherence for an exported report's keyword lists."""
    topics = []
    for fac in report["factors"]:
        kw = [(d["token"], d["mean_activation"], d["count"]) for d in fac["keywords"]]
        ids = [vocab.index_of(d["token"]) for d in fac["keywords"]]
        try:
            coh, skipped = topic_coherence(ids, table)
            topics.append(FactorTopic(fac["index"], kw, coh, skipped))
        except UndefinedCoherence:
            topics.append(FactorTopic(fac["index"], kw, None, len(ids) * (len(ids) - 1) // 2, excluded=True))
    return finalize_report(topics, report.get("config"))
