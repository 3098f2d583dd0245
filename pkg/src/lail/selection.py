"""Inference-time example selection and prompt assembly.

The trained retriever ranks pool examples by cosine similarity of projected
requirement embeddings; four baseline selectors (random, bm25, embed_topk,
uncertainty) share the same interface so evaluation treats them uniformly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import lexical
from .corpus import Example
from .gateway import Embedder, Scorer
from .prompts import render_prompt
from .training import RetrieverCheckpoint, encode, encode_batch
from .util import rng_for, stable_u64

logger = logging.getLogger(__name__)

BASELINE_STRATEGIES = ("random", "bm25", "embed_topk", "uncertainty")
SHOT_ORDERS = ("asc", "desc")
DEFAULT_SHOT_COUNT = 3


class FingerprintMismatch(Exception):
    """Checkpoint and embedder disagree; pass force=True to override."""


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: tuple[str, ...]
    vectors: np.ndarray  # (N, d_out), rows unit-norm (or zero, flagged at build)
    checkpoint_fingerprint: str

    def __post_init__(self) -> None:
        if self.vectors.shape[0] != len(self.ids):
            raise ValueError("vector row count must equal the number of ids")


@dataclass(frozen=True)
class Prompt:
    shots: tuple[tuple[str, str], ...]  # (requirement, code), in rendered order
    test_requirement: str
    rendered: str


def _check_fingerprint(checkpoint: RetrieverCheckpoint, embedder: Embedder, force: bool) -> None:
    actual = embedder.fingerprint()
    if actual != checkpoint.embedder_fingerprint:
        message = (
            f"checkpoint was trained against embedder {checkpoint.embedder_fingerprint!r} "
            f"but {actual!r} is in use"
        )
        if not force:
            raise FingerprintMismatch(message)
        logger.warning("%s (forced)", message)


def build_embedding_index(
    pool: Sequence[Example],
    embedder: Embedder,
    checkpoint: RetrieverCheckpoint,
    force: bool = False,
    embeddings: dict[str, np.ndarray] | None = None,
) -> EmbeddingIndex:
    """Encode every pool requirement through the checkpoint's head, in pool order.

    `embeddings` may supply precomputed raw vectors (e.g. from the training
    cache); anything missing is embedded fresh.
    """
    _check_fingerprint(checkpoint, embedder, force)
    raws = np.stack(
        [
            embeddings[ex.id] if embeddings and ex.id in embeddings else embedder.embed(ex.requirement)
            for ex in pool
        ]
    )
    vectors = encode_batch(checkpoint.head, raws)
    return EmbeddingIndex(
        ids=tuple(ex.id for ex in pool),
        vectors=vectors,
        checkpoint_fingerprint=checkpoint.fingerprint(),
    )


def _rank_by_similarity(ids: Sequence[str], sims: np.ndarray, r: int) -> list[tuple[str, float]]:
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [(ids[i], float(sims[i])) for i in order[:r]]


def retrieve(
    index: EmbeddingIndex,
    test_requirement: str,
    r: int,
    checkpoint: RetrieverCheckpoint,
    embedder: Embedder,
    force: bool = False,
) -> list[tuple[str, float]]:
    """Top-r pool ids by cosine similarity to the test requirement, descending;
    ties broken by id ascending. r beyond the pool size is clamped."""
    if r < 1:
        raise ValueError("r must be >= 1")
    _check_fingerprint(checkpoint, embedder, force)
    if r > len(index.ids):
        logger.warning("requested r=%d exceeds pool size %d; clamping", r, len(index.ids))
        r = len(index.ids)
    query = encode(checkpoint.head, embedder.embed(test_requirement))
    sims = index.vectors @ query
    return _rank_by_similarity(index.ids, sims, r)


@dataclass
class SelectionContext:
    """Whatever the requested baseline needs: a seed, a BM25 index, raw
    embeddings, or a scorer for the (static) uncertainty ranking."""

    seed: int | None = None
    bm25: lexical.Bm25Index | None = None
    embedder: Embedder | None = None
    raw_ids: tuple[str, ...] | None = None
    raw_vectors: np.ndarray | None = None  # (N, d_in), unnormalized ok
    scorer: Scorer | None = None
    _uncertainty_order: list[str] | None = field(default=None, repr=False)


def uncertainty_ranking(pool: Sequence[Example], scorer: Scorer) -> list[str]:
    """Pool ids by ascending zero-shot mean log-probability of each example's
    own code given its own requirement (most uncertain first)."""
    means = []
    for ex in pool:
        result = scorer.score_continuation(render_prompt([], ex.requirement), ex.code)
        means.append((result.mean_logprob, ex.id))
    means.sort(key=lambda pair: (pair[0], pair[1]))
    return [ex_id for _, ex_id in means]


def select_baseline(
    strategy: str,
    pool: Sequence[Example],
    test_requirement: str,
    r: int,
    context: SelectionContext,
) -> list[str]:
    """Pick r pool ids with one of the heuristic strategies.

    random draws a seeded uniform sample (per-test-requirement substream);
    bm25 ranks by lexical similarity; embed_topk by cosine over raw (frozen)
    embeddings; uncertainty returns the same most-uncertain ids for every
    test requirement.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if strategy not in BASELINE_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {BASELINE_STRATEGIES}")
    r = min(r, len(pool))

    if strategy == "random":
        if context.seed is None:
            raise ValueError("random selection requires context.seed")
        ids = sorted(ex.id for ex in pool)
        rng = rng_for(context.seed, "random-baseline", stable_u64(test_requirement))
        picks = rng.choice(len(ids), size=r, replace=False)
        return [ids[i] for i in picks]

    if strategy == "bm25":
        if context.bm25 is None:
            raise ValueError("bm25 selection requires context.bm25")
        return lexical.top_t(context.bm25, lexical.tokenize(test_requirement), r)

    if strategy == "embed_topk":
        if context.raw_ids is None or context.raw_vectors is None:
            raise ValueError("embed_topk selection requires context.raw_ids and raw_vectors")
        return [ex_id for ex_id, _ in _cosine_top(context.raw_ids, context.raw_vectors, test_requirement, r, context)]

    # uncertainty: static ranking, computed once per context
    if context._uncertainty_order is None:
        if context.scorer is None:
            raise ValueError("uncertainty selection requires context.scorer")
        context._uncertainty_order = uncertainty_ranking(pool, context.scorer)
    return context._uncertainty_order[:r]


def _cosine_top(
    ids: Sequence[str],
    vectors: np.ndarray,
    test_requirement: str,
    r: int,
    context: SelectionContext,
) -> list[tuple[str, float]]:
    if context.embedder is None:
        raise ValueError("embed_topk selection requires context.embedder")
    query = np.asarray(context.embedder.embed(test_requirement), dtype=np.float64)
    qn = np.linalg.norm(query)
    norms = np.linalg.norm(vectors, axis=1)
    denom = np.where(norms > 0, norms, 1.0) * (qn if qn > 0 else 1.0)
    sims = (vectors @ query) / denom
    return _rank_by_similarity(ids, sims, r)


def assemble_prompt(
    shots: Sequence[tuple[str, float]],
    pool: Sequence[Example] | dict[str, Example],
    test_requirement: str,
    shot_order: str = "asc",
) -> Prompt:
    """Order shots by similarity and render the prompt.

    The default ascending order puts the most similar shot adjacent to the
    test requirement; "desc" preserves the opposite reading. Ordering is
    stable, so equal similarities keep their selection order.
    """
    if not shots:
        raise ValueError("at least one shot is required")
    if shot_order not in SHOT_ORDERS:
        raise ValueError(f"shot_order must be one of {SHOT_ORDERS}")
    by_id = pool if isinstance(pool, dict) else {ex.id: ex for ex in pool}
    missing = [shot_id for shot_id, _ in shots if shot_id not in by_id]
    if missing:
        raise KeyError(f"shot id(s) not in pool: {missing}")
    ordered = sorted(shots, key=lambda pair: pair[1], reverse=(shot_order == "desc"))
    pairs = tuple((by_id[shot_id].requirement, by_id[shot_id].code) for shot_id, _ in ordered)
    return Prompt(
        shots=pairs,
        test_requirement=test_requirement,
        rendered=render_prompt(list(pairs), test_requirement),
    )


Selector = Callable[[Example], list[tuple[str, float]]]
"""Maps a test example to ranked (pool id, similarity) shots."""


def make_retriever_selector(
    index: EmbeddingIndex,
    checkpoint: RetrieverCheckpoint,
    embedder: Embedder,
    r: int,
    force: bool = False,
) -> Selector:
    def select(test_example: Example) -> list[tuple[str, float]]:
        return retrieve(index, test_example.requirement, r, checkpoint, embedder, force=force)

    return select


def make_baseline_selector(
    strategy: str,
    pool: Sequence[Example],
    r: int,
    context: SelectionContext,
) -> Selector:
    """Wrap select_baseline as a Selector.

    bm25 and embed_topk report their true ranking scores as similarities;
    random and uncertainty have no meaningful score, so descending rank
    weights keep the first-ranked pick adjacent to the test requirement.
    """

    def select(test_example: Example) -> list[tuple[str, float]]:
        ids = select_baseline(strategy, pool, test_example.requirement, r, context)
        if strategy == "bm25":
            query = lexical.tokenize(test_example.requirement)
            return [(ex_id, lexical.bm25_score(context.bm25, query, ex_id)) for ex_id in ids]
        if strategy == "embed_topk":
            scored = _cosine_top(context.raw_ids, context.raw_vectors, test_example.requirement, len(ids), context)
            return scored
        return [(ex_id, float(len(ids) - i)) for i, ex_id in enumerate(ids)]

    return select
