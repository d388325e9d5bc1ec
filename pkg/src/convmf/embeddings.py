"""Pre-trained word vectors aligned to a vocabulary, and cosine similarity."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import PAD, Vocabulary


class EmbeddingFormatError(Exception):
    pass


class UndefinedSimilarity(ValueError):
    """Cosine similarity requested for a zero vector."""


@dataclass
class EmbeddingTable:
    matrix: np.ndarray  # (|V|, D) float64; row PAD is zero
    pretrained: np.ndarray  # (|V|,) bool
    source: str

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return self.matrix.shape[0]


def file_digest(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def load_embedding_table(path, vocab: Vocabulary, seed: int = 0) -> EmbeddingTable:
    """Read a GloVe text file and align it to ``vocab``.

    Vocabulary tokens missing from the file get U(-0.25, 0.25) rows drawn from
    ``seed`` and are flagged as not pretrained.  The PAD row is always zero.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"embedding file not found: {path}")
    dim = None
    found: dict[int, np.ndarray] = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if len(parts) < 2:
                continue
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim} components, found {len(parts) - 1}"
                )
            idx = vocab.index.get(parts[0])
            if idx is None or idx == PAD or idx in found:
                continue
            found[idx] = np.array(parts[1:], dtype=np.float64)
    if dim is None:
        raise EmbeddingFormatError(f"{path}: no vectors")

    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.25, 0.25, size=(len(vocab), dim))
    pretrained = np.zeros(len(vocab), dtype=bool)
    for idx, vec in found.items():
        matrix[idx] = vec
        pretrained[idx] = True
    matrix[PAD] = 0.0
    if not np.all(np.isfinite(matrix)):
        raise EmbeddingFormatError(f"{path}: non-finite vector components")
    return EmbeddingTable(matrix, pretrained, f"{path.name}:sha256={file_digest(path)}")


def write_glove(path, words, vectors) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w, v in zip(words, vectors):
            fh.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarity("cosine similarity of a zero vector")
    # the product is formed symmetrically so that sim(u, v) == sim(v, u) bit for bit
    s = float(u @ v) / (nu * nv)
    return min(1.0, max(-1.0, s))
