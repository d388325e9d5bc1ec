import io
import json

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from convmf.corpus import (
    PAD,
    STOPWORDS,
    TEST,
    TRAIN,
    UNK,
    VALID,
    CorpusError,
    CorpusMismatch,
    RawReview,
    Vocabulary,
    build_corpus,
    build_vocabulary,
    corpus_statistics,
    load_corpus,
    normalize_and_tokenize,
    pad_or_truncate,
    parse_review_records,
    read_review_file,
    save_corpus,
    split_assignment,
    split_dataset,
    subsample_top_items,
)


def jsonl(*objs):
    return io.StringIO("\n".join(o if isinstance(o, str) else json.dumps(o) for o in objs) + "\n")


def test_parse_well_formed_and_missing_text():
    recs = parse_review_records(jsonl(
        {"reviewerID": "u1", "asin": "i1", "overall": 5.0, "reviewText": "Great!"},
        {"reviewerID": "u2", "asin": "i1", "overall": 2},
    ))
    assert recs == [RawReview("u1", "i1", 5.0, "Great!"), RawReview("u2", "i1", 2.0, "")]


def test_malformed_lines_are_skipped_with_line_numbers():
    errors = []
    recs = parse_review_records(jsonl(
        {"reviewerID": "u1", "asin": "i1", "overall": 4.0, "reviewText": "ok"},
        "{broken",
        {"reviewerID": "u2", "overall": 3.0},
        "",
        {"reviewerID": "u3", "asin": "i2", "overall": "x"},
    ), errors)
    assert [r.user_id for r in recs] == ["u1"]
    assert [e.line_number for e in errors] == [2, 3, 5]


def test_fixture_matches_independent_count(fixture_path, fixture_stats):
    errors = []
    stats = corpus_statistics(read_review_file(fixture_path, errors))
    assert stats.n_users == fixture_stats["n_users"]
    assert stats.n_items == fixture_stats["n_items"]
    assert stats.n_reviews == fixture_stats["n_reviews"]
    assert stats.total_words == fixture_stats["total_words"]
    assert len(errors) == fixture_stats["malformed_lines"]


def test_gzip_input(tmp_path, fixture_path):
    import gzip

    gz = tmp_path / "r.json.gz"
    gz.write_bytes(gzip.compress(fixture_path.read_bytes()))
    assert read_review_file(gz) == read_review_file(fixture_path)


def test_normalize_examples():
    assert normalize_and_tokenize("The taste is GREAT, isn't it?") == ["taste", "great"]
    assert normalize_and_tokenize("salt &amp; pepper") == ["salt", "pepper"]
    assert normalize_and_tokenize("“Yummy”—crunchy…") == ["yummy", "crunchy"]
    assert normalize_and_tokenize("") == []


def test_stopword_list():
    from importlib import resources

    lines = [ln for ln in resources.files("convmf").joinpath("data/stopwords_en.txt").read_text().splitlines()
             if ln and not ln.startswith("#")]
    assert len(lines) == 179
    # contractions split at the apostrophe, so "don't" contributes "don" and "t"
    assert len(STOPWORDS) == 153
    assert {"the", "and", "isn", "t", "not"} <= STOPWORDS


@given(st.text(max_size=200))
def test_normalized_tokens_are_clean(text):
    for tok in normalize_and_tokenize(text):
        assert tok and tok == tok.lower() and tok not in STOPWORDS
        assert not any(ch.isspace() for ch in tok)


@given(st.lists(st.integers(2, 50), max_size=100), st.integers(1, 80))
def test_pad_or_truncate(tokens, target):
    out, n = pad_or_truncate(tokens, target)
    assert len(out) == target
    assert n == min(len(tokens), target)
    assert out[:n] == tokens[:n]
    assert all(t == PAD for t in out[n:])


def test_pad_examples():
    assert pad_or_truncate([], 64) == ([PAD] * 64, 0)
    out, n = pad_or_truncate(list(range(2, 102)), 64)
    assert n == 64 and out == list(range(2, 66))


def test_vocabulary_frequency_order_and_reserved():
    vocab = build_vocabulary([["b", "a", "c"], ["a", "b", "d"], ["a"]], min_count=1)
    assert vocab.tokens[:2] == ["<pad>", "<unk>"]
    assert vocab.tokens[2:] == ["a", "b", "c", "d"]
    assert vocab.index_of("zzz") == UNK
    assert vocab.encode(["a", "zzz"]) == [2, UNK]


def test_vocabulary_min_count():
    vocab = build_vocabulary([["x"] * 5 + ["y"] * 4], min_count=5)
    assert "x" in vocab and "y" not in vocab


@given(st.lists(st.lists(st.sampled_from(["ab", "cd", "ef", "gh", "ij"]), max_size=8), max_size=10))
def test_vocabulary_text_roundtrip(docs):
    assume(any(docs))
    vocab = build_vocabulary(docs, min_count=1)
    back = Vocabulary.from_text(vocab.to_text())
    assert back.tokens == vocab.tokens and back.hash == vocab.hash


@given(st.integers(0, 500), st.integers(0, 10_000))
def test_split_partition(n, seed):
    codes = split_assignment(n, (0.8, 0.1, 0.1), seed)
    assert len(codes) == n
    assert set(np.unique(codes)) <= {TRAIN, VALID, TEST}
    assert abs(int((codes == TRAIN).sum()) - 0.8 * n) <= 1


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split_dataset(list(range(10)), (0.5, 0.6, 0.1), 0)


def test_split_deterministic():
    a = split_assignment(1000, (0.8, 0.1, 0.1), 7)
    assert np.array_equal(a, split_assignment(1000, (0.8, 0.1, 0.1), 7))
    assert not np.array_equal(a, split_assignment(1000, (0.8, 0.1, 0.1), 8))


def test_vocabulary_sees_training_text_only():
    recs = [RawReview(f"u{i}", f"i{i % 3}", 4.0, f"common word{i}") for i in range(60)]
    corpus = build_corpus(recs, seed=1, min_count=1)
    held_out = {f"word{i}" for i in np.flatnonzero(corpus.split != TRAIN)}
    assert not held_out & set(corpus.vocab.tokens)
    assert "common" in corpus.vocab


def test_subsample_top_items():
    recs = [RawReview("u", i, 3.0, "") for i in ["a", "b", "b", "c", "c", "c"]]
    assert {r.item_id for r in subsample_top_items(recs, 2)} == {"b", "c"}


def test_corpus_roundtrip(tmp_path, tiny_corpus):
    save_corpus(tiny_corpus, tmp_path)
    back = load_corpus(tmp_path)
    for name in ("tokens", "true_length", "user_index", "item_index", "rating", "split"):
        assert np.array_equal(getattr(back, name), getattr(tiny_corpus, name))
    assert back.vocab.hash == tiny_corpus.vocab.hash
    assert back.user_ids == tiny_corpus.user_ids and back.item_ids == tiny_corpus.item_ids


def test_corpus_hash_mismatch(tmp_path, tiny_corpus):
    save_corpus(tiny_corpus, tmp_path)
    (tmp_path / "vocab.txt").write_text("extra\n" + (tmp_path / "vocab.txt").read_text())
    with pytest.raises(CorpusMismatch):
        load_corpus(tmp_path)


def test_incomplete_corpus_dir(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path)


def test_preprocess_is_byte_stable(tmp_path, fixture_path):
    recs = read_review_file(fixture_path)
    for d in ("a", "b"):
        save_corpus(build_corpus(recs, seed=3), tmp_path / d)
    for f in ("corpus.bin", "vocab.txt", "ids.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_texts_removed_blanks_only_heldout(tiny_corpus):
    blank = tiny_corpus.with_texts_removed()
    held = tiny_corpus.split != TRAIN
    assert np.all(blank.tokens[held] == PAD)
    assert np.array_equal(blank.tokens[~held], tiny_corpus.tokens[~held])
