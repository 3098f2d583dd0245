"""Okapi BM25 over requirement text, used for stage-one candidate filtering
and as the lexical selection baseline.

Only requirements are indexed; code is never tokenized into the index.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

_TOKEN_RE = re.compile(r"[0-9a-z]+")

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric character, dropping empties."""
    return _TOKEN_RE.findall(text.lower())


def token_jaccard(a: str, b: str) -> float:
    """Jaccard similarity of the token *sets* of two texts. Empty vs anything is 0."""
    sa, sb = set(tokenize(a)), set(tokenize(b))
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


@dataclass(frozen=True)
class Bm25Index:
    doc_ids: tuple[str, ...]
    doc_token_counts: tuple[dict[str, int], ...]
    doc_lengths: tuple[int, ...]
    avg_doc_length: float
    doc_frequency: dict[str, int]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    def __post_init__(self) -> None:
        if self.k1 <= 0:
            raise ValueError(f"k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")
        object.__setattr__(self, "_id_pos", {doc_id: i for i, doc_id in enumerate(self.doc_ids)})

    def position(self, doc_id: str) -> int:
        pos = self._id_pos.get(doc_id)  # type: ignore[attr-defined]
        if pos is None:
            raise KeyError(f"unknown doc_id {doc_id!r}")
        return pos


def build_index(
    docs: Iterable[tuple[str, str]],
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> Bm25Index:
    """Index (id, text) pairs. The built index is immutable and safely shareable."""
    ids: list[str] = []
    counts: list[dict[str, int]] = []
    lengths: list[int] = []
    df: Counter[str] = Counter()
    for doc_id, text in docs:
        tokens = tokenize(text)
        ids.append(doc_id)
        tf = dict(Counter(tokens))
        counts.append(tf)
        lengths.append(len(tokens))
        df.update(tf.keys())
    if not ids:
        raise ValueError("cannot build a BM25 index over zero documents")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate document ids in BM25 index")
    avg = sum(lengths) / len(lengths)
    return Bm25Index(
        doc_ids=tuple(ids),
        doc_token_counts=tuple(counts),
        doc_lengths=tuple(lengths),
        avg_doc_length=avg,
        doc_frequency=dict(df),
        k1=k1,
        b=b,
    )


def _idf(index: Bm25Index, token: str) -> float:
    # +1 inside the log keeps scores non-negative even for tokens present in
    # every document of a tiny pool.
    n_docs = len(index.doc_ids)
    df = index.doc_frequency.get(token, 0)
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def bm25_score(index: Bm25Index, query_tokens: Sequence[str], doc_id: str) -> float:
    """Okapi BM25 score of one document against the query token sequence.

    Query tokens contribute with multiplicity: a token appearing twice in the
    query adds its term score twice.
    """
    pos = index.position(doc_id)
    tf_map = index.doc_token_counts[pos]
    length_norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths[pos] / index.avg_doc_length)
    score = 0.0
    for token in query_tokens:
        tf = tf_map.get(token, 0)
        if tf == 0:
            continue
        score += _idf(index, token) * (tf * (index.k1 + 1.0)) / (tf + length_norm)
    return score


def top_t(
    index: Bm25Index,
    query_tokens: Sequence[str],
    t: int,
    exclude: set[str] | frozenset[str] = frozenset(),
) -> list[str]:
    """The min(t, available) highest-scoring doc ids, ties broken by id ascending."""
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    scored = [
        (-bm25_score(index, query_tokens, doc_id), doc_id)
        for doc_id in index.doc_ids
        if doc_id not in exclude
    ]
    scored.sort()
    return [doc_id for _, doc_id in scored[:t]]
