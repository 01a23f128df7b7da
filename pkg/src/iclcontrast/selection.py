"""ICL example retrieval: embedding nearest neighbour, Okapi BM25 and
confounder pairing for the hateful-memes setting."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, InputError, SelectionError, ValidationError

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass
class CorpusEntry:
    id: str
    text: str
    embedding: Optional[np.ndarray] = None
    label: Optional[int] = None
    meta: dict = field(default_factory=dict)


def _check_unique(corpus: Sequence[CorpusEntry]) -> None:
    ids = [e.id for e in corpus]
    if len(set(ids)) != len(ids):
        raise ValidationError("corpus ids must be unique")


@dataclass
class Bm25Index:
    ids: list
    term_freq: list
    doc_len: list
    doc_freq: dict
    avg_len: float
    k1: float = 1.2
    b: float = 0.75

    @classmethod
    def build(cls, corpus: Sequence[CorpusEntry], k1: float = 1.2, b: float = 0.75) -> "Bm25Index":
        if not corpus:
            raise InputError("BM25 index needs at least one document")
        _check_unique(corpus)
        tfs = [Counter(tokenize(e.text)) for e in corpus]
        lens = [sum(tf.values()) for tf in tfs]
        df: Counter = Counter()
        for tf in tfs:
            df.update(tf.keys())
        return cls([e.id for e in corpus], tfs, lens, dict(df), sum(lens) / len(lens), k1, b)

    @property
    def n_docs(self) -> int:
        return len(self.ids)

    def idf(self, term: str) -> float:
        n = self.doc_freq.get(term, 0)
        return math.log((self.n_docs - n + 0.5) / (n + 0.5) + 1.0)

    def scores(self, query: str) -> list[float]:
        terms = tokenize(query)
        out = []
        for tf, dl in zip(self.term_freq, self.doc_len):
            norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_len) if self.avg_len else self.k1
            s = 0.0
            for t in terms:
                f = tf.get(t, 0)
                if f:
                    s += self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
            out.append(s)
        return out


def bm25_rank(query: str, index: Bm25Index, top_k: int = 10) -> list[tuple[str, float]]:
    """Top ``top_k`` documents by BM25 score, ties broken by id."""
    if top_k <= 0:
        raise DomainError("top_k must be positive")
    ranked = sorted(zip(index.ids, index.scores(query)), key=lambda r: (-r[1], r[0]))
    return ranked[:top_k]


def _distances(query: np.ndarray, mat: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        return np.linalg.norm(mat - query, axis=1)
    if metric == "cosine":
        denom = np.linalg.norm(mat, axis=1) * np.linalg.norm(query)
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(denom > 0, mat @ query / denom, 0.0)
        return 1.0 - sim
    raise DomainError(f"unknown metric {metric!r}")


def nearest_by_embedding(query, corpus: Sequence[CorpusEntry], metric: str = "cosine") -> str:
    """Id of the closest entry; ties go to the lexicographically smallest id."""
    if not corpus:
        raise InputError("empty corpus")
    query = np.asarray(query, dtype=float)
    missing = [e.id for e in corpus if e.embedding is None or np.shape(e.embedding) != query.shape]
    if missing:
        raise InputError(f"entries without a matching embedding: {missing[:5]}")
    mat = np.stack([np.asarray(e.embedding, dtype=float) for e in corpus])
    dist = _distances(query, mat, metric)
    best = min(range(len(corpus)), key=lambda i: (dist[i], corpus[i].id))
    return corpus[best].id


def confounder_pairs(dataset: Sequence[CorpusEntry]) -> list[tuple[CorpusEntry, CorpusEntry]]:
    """All (benign, hateful) pairs sharing exactly the same text."""
    by_text: dict[str, list[CorpusEntry]] = {}
    for e in dataset:
        if e.label is None:
            continue
        by_text.setdefault(e.text, []).append(e)
    pairs = []
    for text in sorted(by_text):
        group = by_text[text]
        benign = sorted((e for e in group if e.label == 0), key=lambda e: e.id)
        hateful = sorted((e for e in group if e.label == 1), key=lambda e: e.id)
        pairs.extend(product(benign, hateful))
    return pairs


def select_one_shot(
    query_text: str, train: Sequence[CorpusEntry], index: Optional[Bm25Index] = None
) -> tuple[CorpusEntry, CorpusEntry]:
    """Best-scoring benign and hateful training entries for ``query_text``."""
    index = index or Bm25Index.build(train)
    by_id = {e.id: e for e in train}
    picks: dict[int, CorpusEntry] = {}
    for doc_id, _ in bm25_rank(query_text, index, top_k=index.n_docs):
        entry = by_id.get(doc_id)
        if entry is not None and entry.label in (0, 1) and entry.label not in picks:
            picks[entry.label] = entry
            if len(picks) == 2:
                break
    if len(picks) < 2:
        raise SelectionError("training set must contain both benign and hateful entries")
    return picks[0], picks[1]
