"""Review ingestion, text normalization, vocabulary and fixed-length encoding.

Raw input is Amazon-style JSON lines (``reviewerID``, ``asin``, ``reviewText``,
``overall``).  Everything downstream works on a :class:`Corpus`, a columnar
bundle of fixed-length token-id rows plus user/item/rating/split columns.
"""

from __future__ import annotations

import hashlib
import html
import json
import logging
import math
import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
REVIEW_LENGTH = 64

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "valid": VALID, "validation": VALID, "test": TEST}

CORPUS_MAGIC = b"CMFTOK\x00\x01"
CORPUS_VERSION = 1


class CorpusError(Exception):
    """Fatal problem with corpus inputs."""


class CorpusMismatch(CorpusError):
    """Corpus files that do not belong together (hash disagreement)."""


@dataclass(frozen=True)
class RawReview:
    user_id: str
    item_id: str
    rating: float
    text: str

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if not math.isfinite(self.rating):
            raise ValueError(f"non-finite rating {self.rating!r}")


@dataclass(frozen=True)
class LineError:
    """A recoverable per-line parse failure."""

    line_number: int
    message: str


# ---------------------------------------------------------------------------
# parsing


def iter_review_records(stream: IO, errors: list | None = None) -> Iterator[RawReview]:
    """Yield one RawReview per well-formed JSON line of ``stream``.

    Malformed lines are logged and appended to ``errors`` as
    :class:`LineError`; they never stop the iteration.  Lines may be bytes or
    str.  Blank lines are ignored.
    """
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("record is not a JSON object")
            text = obj.get("reviewText") or ""
            review = RawReview(
                user_id=str(obj["reviewerID"]),
                item_id=str(obj["asin"]),
                rating=float(obj["overall"]),
                text=str(text),
            )
        except (ValueError, KeyError, TypeError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            log.warning("line %d skipped (%s)", lineno, msg)
            if errors is not None:
                errors.append(LineError(lineno, msg))
            continue
        yield review


def parse_review_records(stream: IO, errors: list | None = None) -> list[RawReview]:
    return list(iter_review_records(stream, errors))


def read_review_file(path, errors: list | None = None) -> list[RawReview]:
    """Parse a (optionally gzip-compressed) JSON-lines review file."""
    path = Path(path)
    if path.suffix == ".gz":
        import gzip

        with gzip.open(path, "rb") as fh:
            return parse_review_records(fh, errors)
    with open(path, "rb") as fh:
        return parse_review_records(fh, errors)


# ---------------------------------------------------------------------------
# text normalization


def _strip_punctuation(text: str) -> str:
    return "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)


def load_stopwords() -> frozenset[str]:
    """The pinned English stopword list, normalized like review text."""
    raw = resources.files("convmf").joinpath("data/stopwords_en.txt").read_text("utf-8")
    words = set()
    for line in raw.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        words.update(_strip_punctuation(line.lower()).split())
    return frozenset(words)


STOPWORDS = load_stopwords()


def normalize_and_tokenize(text: str, stopwords: Iterable[str] = STOPWORDS) -> list[str]:
    """Lowercase, unescape entities, replace punctuation with spaces, split, drop stopwords.

    >>> normalize_and_tokenize("The taste is GREAT!")
    ['taste', 'great']
    """
    if not text:
        return []
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    cleaned = _strip_punctuation(html.unescape(text).lower())
    return [tok for tok in cleaned.split() if tok not in stop]


def pad_or_truncate(tokens: Sequence[int], target_len: int = REVIEW_LENGTH, pad: int = PAD):
    """Return ``(fixed_length_list, true_length)``; truncation keeps the head."""
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    head = list(tokens[:target_len])
    true_length = len(head)
    return head + [pad] * (target_len - true_length), true_length


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    tokens: list[str]  # index -> token, reserved entries first
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            self.tokens = [PAD_TOKEN, UNK_TOKEN] + [t for t in self.tokens if t not in (PAD_TOKEN, UNK_TOKEN)]
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def index_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.index.get
        return [get(t, UNK) for t in tokens]

    def to_text(self) -> str:
        """One token per line; line i holds index i + 2."""
        return "".join(t + "\n" for t in self.tokens[2:])

    @classmethod
    def from_text(cls, text: str, min_count: int = 1) -> "Vocabulary":
        return cls([PAD_TOKEN, UNK_TOKEN] + [ln for ln in text.split("\n") if ln], min_count)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def build_vocabulary(token_lists: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Index tokens seen at least ``min_count`` times, by (-frequency, token)."""
    counts = Counter()
    n_docs = 0
    for toks in token_lists:
        counts.update(toks)
        n_docs += 1
    if n_docs == 0:
        raise CorpusError("cannot build a vocabulary from an empty training corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept, min_count)


# ---------------------------------------------------------------------------
# splitting and statistics


def split_dataset(records: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 42):
    """Seeded per-record shuffle into (train, validation, test) lists."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    assignment = split_assignment(len(records), ratios, seed)
    parts = ([], [], [])
    for rec, s in zip(records, assignment):
        parts[s].append(rec)
    return parts


def split_assignment(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 42) -> np.ndarray:
    """Split label (TRAIN/VALID/TEST) per record position."""
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.full(n, TEST, dtype=np.int8)
    labels[perm[:n_train]] = TRAIN
    labels[perm[n_train : n_train + n_valid]] = VALID
    return labels


@dataclass(frozen=True)
class CorpusStats:
    n_users: int
    n_items: int
    n_reviews: int
    avg_reviews_per_item: float
    total_words: int
    avg_words_per_review: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def table(self) -> str:
        rows = [
            ("# users", f"{self.n_users:,}"),
            ("# items", f"{self.n_items:,}"),
            ("total # reviews", f"{self.n_reviews:,}"),
            ("avg. # reviews per item", f"{self.avg_reviews_per_item:.0f}"),
            ("total # words", f"{self.total_words:,}"),
            ("avg. number of words per review", f"{self.avg_words_per_review:.0f}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def count_words(text: str) -> int:
    """Raw whitespace-delimited word count (before any normalization)."""
    return len(text.split())


def corpus_statistics(records: Sequence[RawReview]) -> CorpusStats:
    users, items = set(), set()
    total_words = 0
    for r in records:
        users.add(r.user_id)
        items.add(r.item_id)
        total_words += count_words(r.text)
    n = len(records)
    return CorpusStats(
        n_users=len(users),
        n_items=len(items),
        n_reviews=n,
        avg_reviews_per_item=n / len(items) if items else 0.0,
        total_words=total_words,
        avg_words_per_review=total_words / n if n else 0.0,
    )


def subsample_top_items(records: Sequence[RawReview], n_items: int) -> list[RawReview]:
    """Keep every review of the ``n_items`` most-reviewed items (ties by item id)."""
    counts = Counter(r.item_id for r in records)
    keep = set(sorted(counts, key=lambda i: (-counts[i], i))[:n_items])
    return [r for r in records if r.item_id in keep]


# ---------------------------------------------------------------------------
# tokenized corpus


@dataclass
class Corpus:
    """Columnar tokenized corpus; row i is one review/rating record."""

    tokens: np.ndarray  # (n, L) int32
    true_length: np.ndarray  # (n,) int32
    user_index: np.ndarray  # (n,) int32
    item_index: np.ndarray  # (n,) int32
    rating: np.ndarray  # (n,) float64
    split: np.ndarray  # (n,) int8
    vocab: Vocabulary
    user_ids: list[str]
    item_ids: list[str]

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def review_length(self) -> int:
        return self.tokens.shape[1]

    def __len__(self):
        return len(self.rating)

    def rows(self, split) -> np.ndarray:
        code = SPLIT_NAMES[split] if isinstance(split, str) else split
        return np.flatnonzero(self.split == code)

    def train_mean(self) -> float:
        return float(self.rating[self.split == TRAIN].mean())

    def item_train_rows(self) -> list[np.ndarray]:
        """Row indices of each item's training reviews, in corpus order."""
        rows = self.rows(TRAIN)
        order = np.argsort(self.item_index[rows], kind="stable")
        rows = rows[order]
        bounds = np.searchsorted(self.item_index[rows], np.arange(self.n_items + 1))
        return [rows[bounds[j] : bounds[j + 1]] for j in range(self.n_items)]

    def with_texts_removed(self, splits=(VALID, TEST)) -> "Corpus":
        """Copy whose reviews in ``splits`` are blanked to PAD (firewall ablations)."""
        tokens = self.tokens.copy()
        lengths = self.true_length.copy()
        mask = np.isin(self.split, splits)
        tokens[mask] = PAD
        lengths[mask] = 0
        return Corpus(tokens, lengths, self.user_index, self.item_index, self.rating, self.split,
                      self.vocab, self.user_ids, self.item_ids)


def build_corpus(
    records: Sequence[RawReview],
    ratios=(0.8, 0.1, 0.1),
    seed: int = 42,
    min_count: int = 5,
    review_length: int = REVIEW_LENGTH,
    stopwords: Iterable[str] = STOPWORDS,
) -> Corpus:
    """Tokenize, split, build the train-only vocabulary and encode every record."""
    if not records:
        raise CorpusError("no review records")
    stop = frozenset(stopwords)
    token_lists = [normalize_and_tokenize(r.text, stop) for r in records]
    split = split_assignment(len(records), ratios, seed)
    vocab = build_vocabulary((t for t, s in zip(token_lists, split) if s == TRAIN), min_count)

    user_ids = sorted({r.user_id for r in records})
    item_ids = sorted({r.item_id for r in records})
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {v: i for i, v in enumerate(item_ids)}

    n = len(records)
    tokens = np.zeros((n, review_length), dtype=np.int32)
    lengths = np.zeros(n, dtype=np.int32)
    for i, toks in enumerate(token_lists):
        ids, lengths[i] = pad_or_truncate(vocab.encode(toks[:review_length]), review_length)
        tokens[i] = ids
    return Corpus(
        tokens=tokens,
        true_length=lengths,
        user_index=np.array([uidx[r.user_id] for r in records], dtype=np.int32),
        item_index=np.array([iidx[r.item_id] for r in records], dtype=np.int32),
        rating=np.array([r.rating for r in records], dtype=np.float64),
        split=split,
        vocab=vocab,
        user_ids=user_ids,
        item_ids=item_ids,
    )


_HEADER = struct.Struct("<8sIIQ64s")


def save_corpus(corpus: Corpus, directory) -> dict[str, Path]:
    """Write ``corpus.bin``, ``vocab.txt`` and ``ids.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab_path = directory / "vocab.txt"
    vocab_path.write_text(corpus.vocab.to_text(), encoding="utf-8")
    ids_path = directory / "ids.json"
    ids_path.write_text(
        json.dumps({"users": corpus.user_ids, "items": corpus.item_ids, "min_count": corpus.vocab.min_count}),
        encoding="utf-8",
    )
    bin_path = directory / "corpus.bin"
    n, L = corpus.tokens.shape
    with open(bin_path, "wb") as fh:
        fh.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, L, n, corpus.vocab.hash.encode("ascii")))
        fh.write(corpus.user_index.astype("<i4").tobytes())
        fh.write(corpus.item_index.astype("<i4").tobytes())
        fh.write(corpus.rating.astype("<f8").tobytes())
        fh.write(corpus.true_length.astype("<i4").tobytes())
        fh.write(corpus.split.astype("i1").tobytes())
        fh.write(corpus.tokens.astype("<i4").tobytes())
    return {"corpus": bin_path, "vocab": vocab_path, "ids": ids_path}


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    try:
        ids = json.loads((directory / "ids.json").read_text(encoding="utf-8"))
        vocab = Vocabulary.from_text((directory / "vocab.txt").read_text(encoding="utf-8"), ids.get("min_count", 1))
        raw = (directory / "corpus.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CorpusError(f"incomplete corpus directory {directory}: {exc}") from exc
    magic, version, L, n, vhash = _HEADER.unpack_from(raw)
    if magic != CORPUS_MAGIC or version != CORPUS_VERSION:
        raise CorpusError(f"{directory / 'corpus.bin'} is not a version-{CORPUS_VERSION} corpus file")
    if vhash.decode("ascii") != vocab.hash:
        raise CorpusMismatch(
            f"vocabulary hash mismatch: corpus.bin has {vhash.decode('ascii')}, vocab.txt has {vocab.hash}"
        )
    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    user_index = take("<i4", n).astype(np.int32)
    item_index = take("<i4", n).astype(np.int32)
    rating = take("<f8", n).astype(np.float64)
    true_length = take("<i4", n).astype(np.int32)
    split = take("i1", n).astype(np.int8)
    tokens = take("<i4", n * L).astype(np.int32).reshape(n, L)
    return Corpus(tokens, true_length, user_index, item_index, rating, split, vocab, ids["users"], ids["items"])
