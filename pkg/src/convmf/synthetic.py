"""Seeded synthetic review worlds with planted topic structure.

A world has ``n_topics`` word clusters in a shared vector space, a pool of
generic filler words with unrelated vectors, and two sentiment clusters.
Items draw a primary and secondary topic, users draw topic preferences, and
a rating is a noisy function of their agreement.  Review text mixes
stopwords, generic words, the item's topic words and sentiment words chosen
from the rating.  The world's vectors are written in GloVe text format so
the full pipeline runs without external downloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .corpus import STOPWORDS, RawReview
from .embeddings import write_glove

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


@dataclass
class WorldSpec:
    n_users: int = 300
    n_items: int = 350
    n_topics: int = 10
    words_per_topic: int = 15
    n_generic: int = 400
    n_sentiment: int = 10
    dim: int = 24
    ratings_per_user: float = 30.0
    topic_spread: float = 1.0  # within-cluster noise relative to centroid scale
    p_stopword: float = 0.35
    p_topic: float = 0.06
    p_sentiment: float = 0.05
    review_words: tuple = (30, 90)
    preference_scale: float = 0.6
    rating_noise: float = 0.8
    item_quality: float = 0.6
    user_bias: float = 0.2
    quality_sensitivity: float = 0.5  # spread of per-user weight on item quality around 1
    generic_zipf: float = 0.5
    missing_vector_fraction: float = 0.05
    seed: int = 7


@dataclass
class World:
    spec: WorldSpec
    records: list[RawReview]
    words: list[str]
    vectors: np.ndarray
    word_topic: dict  # word -> topic id (generic: -1, sentiment: "pos"/"neg")
    glove_words: list[str]

    def write(self, directory) -> dict:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        reviews = directory / "reviews.jsonl"
        write_reviews_jsonl(self.records, reviews)
        glove = directory / "vectors.txt"
        keep = set(self.glove_words)
        idx = [i for i, w in enumerate(self.words) if w in keep]
        write_glove(glove, [self.words[i] for i in idx], self.vectors[idx])
        (directory / "world.json").write_text(json.dumps(asdict(self.spec), sort_keys=True), encoding="utf-8")
        return {"reviews": reviews, "vectors": glove}


def write_reviews_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"reviewerID": r.user_id, "asin": r.item_id, "reviewText": r.text,
                                 "overall": r.rating}) + "\n")


def _pseudo_words(rng, n, taken):
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(k))
        if w not in taken and w not in STOPWORDS:
            taken.add(w)
            out.append(w)
    return out


def generate_world(spec: WorldSpec = WorldSpec()) -> World:
    rng = np.random.default_rng(spec.seed)
    taken: set = set()
    K, D = spec.n_topics, spec.dim

    topic_words = [_pseudo_words(rng, spec.words_per_topic, taken) for _ in range(K)]
    generic = _pseudo_words(rng, spec.n_generic, taken)
    pos_words = _pseudo_words(rng, spec.n_sentiment, taken)
    neg_words = _pseudo_words(rng, spec.n_sentiment, taken)

    words, vecs, word_topic = [], [], {}
    centroids = rng.normal(size=(K + 2, D))
    for k, ws in enumerate(topic_words):
        for w in ws:
            words.append(w)
            vecs.append(centroids[k] + spec.topic_spread * rng.normal(size=D))
            word_topic[w] = k
    for label, ws, c in (("pos", pos_words, centroids[K]), ("neg", neg_words, centroids[K + 1])):
        for w in ws:
            words.append(w)
            vecs.append(c + spec.topic_spread * rng.normal(size=D))
            word_topic[w] = label
    for w in generic:
        words.append(w)
        vecs.append(rng.normal(size=D) * np.sqrt(1.0 + spec.topic_spread**2))
        word_topic[w] = -1
    vectors = np.array(vecs)

    n_missing = int(round(spec.missing_vector_fraction * len(generic)))
    missing = set(rng.choice(generic, size=n_missing, replace=False).tolist()) if n_missing else set()
    glove_words = [w for w in words if w not in missing]

    # items: primary topic plus a weaker secondary one
    primary = rng.integers(0, K, size=spec.n_items)
    secondary = (primary + rng.integers(1, K, size=spec.n_items)) % K
    theta = np.zeros((spec.n_items, K))
    theta[np.arange(spec.n_items), primary] = 1.0
    theta[np.arange(spec.n_items), secondary] += 0.4
    item_bias = rng.normal(scale=spec.item_quality, size=spec.n_items)
    prefs = rng.normal(scale=spec.preference_scale, size=(spec.n_users, K))
    user_bias = rng.normal(scale=spec.user_bias, size=spec.n_users)
    sensitivity = 1.0 + rng.normal(scale=spec.quality_sensitivity, size=spec.n_users)

    stop = sorted(STOPWORDS)
    zipf = 1.0 / np.arange(1, len(generic) + 1) ** spec.generic_zipf
    zipf /= zipf.sum()
    item_pop = rng.dirichlet(np.full(spec.n_items, 2.0))

    records = []
    user_names = [f"U{u:05d}" for u in range(spec.n_users)]
    item_names = [f"I{j:05d}" for j in range(spec.n_items)]
    for u in range(spec.n_users):
        n_r = max(1, int(rng.poisson(spec.ratings_per_user)))
        n_r = min(n_r, spec.n_items)
        items = rng.choice(spec.n_items, size=n_r, replace=False, p=item_pop)
        for j in items:
            score = 3.9 + prefs[u] @ theta[j] + sensitivity[u] * item_bias[j] + user_bias[u] + rng.normal(scale=spec.rating_noise)
            rating = float(np.clip(np.rint(score), 1, 5))
            topic_p = theta[j] / theta[j].sum()
            n_words = int(rng.integers(*spec.review_words))
            text = []
            for _ in range(n_words):
                x = rng.random()
                if x < spec.p_stopword:
                    text.append(stop[int(rng.integers(len(stop)))])
                elif x < spec.p_stopword + spec.p_topic:
                    k = int(rng.choice(K, p=topic_p))
                    text.append(topic_words[k][int(rng.integers(spec.words_per_topic))])
                elif x < spec.p_stopword + spec.p_topic + spec.p_sentiment and rating != 3.0:
                    pool = pos_words if rating > 3 else neg_words
                    text.append(pool[int(rng.integers(len(pool)))])
                else:
                    text.append(generic[int(rng.choice(len(generic), p=zipf))])
            if rng.random() < 0.3:
                text[-1] += rng.choice([".", "!", ","])
            if rng.random() < 0.2:
                text[0] = text[0].capitalize()
            records.append(RawReview(user_names[u], item_names[j], rating, " ".join(text)))
    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    return World(spec, records, words, vectors, word_topic, glove_words)
