import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from convmf import model as m
from convmf import topics as tp
from convmf.corpus import PAD, TRAIN, UNK, Vocabulary
from convmf.embeddings import EmbeddingTable


def brute_coherence(vectors):
    sims = []
    for a, b in itertools.combinations(vectors, 2):
        sims.append(sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b)))
    return sum(sims) / len(sims)


def test_redistribute_worked_example():
    mass, members = tp.redistribute(np.array([2.0, 4.0, 6.0, 8.0]), window=2, length=5)
    assert np.allclose(mass, [1.0, 3.0, 5.0, 7.0, 4.0])
    assert members.tolist() == [1, 2, 2, 2, 1]


@given(st.integers(1, 6), st.integers(0, 30), st.integers(0, 1000))
def test_redistribution_conserves_mass(w, extra, seed):
    L = w + extra
    acts = np.random.default_rng(seed).normal(scale=5, size=(3, 4, L - w + 1))
    mass, members = tp.redistribute(acts, w, L)
    assert np.all(np.abs(mass.sum(-1) - acts.sum(-1)) <= 1e-10)
    assert members.sum() == w * (L - w + 1)


def test_redistribute_rejects_wrong_length():
    with pytest.raises(ValueError):
        tp.redistribute(np.zeros(10), 5, 64)


@pytest.fixture(scope="module")
def checkpoint(tiny_corpus, tiny_table):
    rng = np.random.default_rng(9)
    return m.init_params(tiny_corpus.n_users, 3, 5, tiny_table.dim, 3.0, rng, scale=0.5)


def test_accumulation_matches_loop_oracle(tiny_corpus, tiny_table, checkpoint):
    rows = tiny_corpus.rows(TRAIN)[:25]
    stats = tp.accumulate_word_activations(checkpoint, tiny_corpus, tiny_table.matrix, chunk=7, rows=rows)
    F, V, w = 3, len(tiny_corpus.vocab), 5
    sums = np.zeros((F, V))
    counts = np.zeros(V)
    for r in rows:
        toks = tiny_corpus.tokens[r]
        _, acts = m.review_embedding(toks, tiny_table.matrix, checkpoint)
        for t in range(acts.shape[1]):
            for pos in range(t, t + w):
                if toks[pos] in (PAD, UNK):
                    continue
                sums[:, toks[pos]] += acts[:, t] / w
                counts[toks[pos]] += 1
    assert np.allclose(stats.sums, sums, atol=1e-10)
    assert np.array_equal(stats.counts, counts)
    assert stats.sums[:, PAD].sum() == stats.sums[:, UNK].sum() == 0


def test_only_training_reviews_are_swept(tiny_corpus, tiny_table, checkpoint):
    full = tp.accumulate_word_activations(checkpoint, tiny_corpus, tiny_table.matrix)
    blank = tp.accumulate_word_activations(checkpoint, tiny_corpus.with_texts_removed(), tiny_table.matrix)
    assert np.array_equal(full.sums, blank.sums)


def small_stats():
    vocab = Vocabulary(["<pad>", "<unk>", "bb", "aa", "cc", "dd"])
    sums = np.array([[0, 0, 2.0, 2.0, 1.0, 9.0]])
    counts = np.array([0, 0, 1, 1, 1, 1])
    occurrences = np.array([0, 0, 5, 5, 5, 1])
    return vocab, tp.WordActivationStats(sums, counts, occurrences, 5)


def test_top_k_order_floor_and_ties():
    vocab, stats = small_stats()
    ids = tp.top_k_keywords(stats, 0, k=3, count_floor=5, vocab=vocab)
    assert [vocab.token_of(i) for i in ids] == ["aa", "bb", "cc"]  # dd below floor; aa/bb tie lexicographic
    assert tp.top_k_keywords(stats, 0, k=1, count_floor=1, vocab=vocab) == [5]
    with pytest.raises(ValueError):
        tp.top_k_keywords(stats, 0, k=0)


def unit_table(vectors, pretrained=None):
    vectors = np.asarray(vectors, dtype=float)
    flags = np.ones(len(vectors), dtype=bool) if pretrained is None else np.asarray(pretrained)
    return EmbeddingTable(vectors, flags, "test")


@given(arrays(np.float64, (6, 4), elements=st.floats(0.1, 10)))
def test_coherence_equals_brute_force(vectors):
    table = unit_table(vectors)
    coh, skipped = tp.topic_coherence(range(6), table)
    assert skipped == 0
    assert abs(coh - brute_coherence(vectors.tolist())) <= 1e-12
    assert -1.0 <= coh <= 1.0


def test_coherence_examples():
    same = unit_table([[1, 0], [2, 0], [3, 0]])
    assert tp.topic_coherence([0, 1, 2], same)[0] == 1.0
    mixed = unit_table([[1, 0], [0, 1], [5, 5]], pretrained=[True, True, False])
    coh, skipped = tp.topic_coherence([0, 1, 2], mixed)
    assert coh == 0.0 and skipped == 2
    with pytest.raises(tp.UndefinedCoherence):
        tp.topic_coherence([0, 2], mixed)


def test_report_order_and_exclusion():
    topics = [tp.FactorTopic(0, [], 0.2), tp.FactorTopic(1, [], None, 3, excluded=True), tp.FactorTopic(2, [], 0.5)]
    report = tp.finalize_report(topics)
    assert [t.index for t in report.factors] == [2, 0, 1]
    assert report.overall_coherence == pytest.approx(0.35, abs=1e-15)
    assert report.skipped_pairs == 3
    single = tp.finalize_report([tp.FactorTopic(4, [], 0.7)])
    assert single.overall_coherence == 0.7


def test_topic_report_invariants_and_rescore(tiny_corpus, tiny_table, checkpoint):
    report = tp.topic_report(checkpoint, tiny_corpus, tiny_table, k=6, count_floor=2)
    assert len(report.factors) == 3
    for t in report.factors:
        acts = [a for _, a, _ in t.keywords]
        assert acts == sorted(acts, reverse=True)
        assert len({tok for tok, _, _ in t.keywords}) == len(t.keywords) == 6
    cohs = [t.coherence for t in report.factors if not t.excluded]
    assert cohs == sorted(cohs, reverse=True)
    doc = json.loads(report.to_json())
    assert tp.rescore_report(doc, tiny_corpus.vocab, tiny_table).to_json() == report.to_json()
    again = tp.topic_report(checkpoint, tiny_corpus, tiny_table, k=6, count_floor=2)
    assert again.to_json() == report.to_json()
