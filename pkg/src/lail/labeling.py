"""Candidate estimation and labeling.

For each anchor in the pool, a cheap lexical stage keeps the t most similar
requirements, an LLM scores how much each survivor helps predict the anchor's
ground-truth code, and the top-z / bottom-v survivors become the anchor's
positive / negative sets. The emitted labels train the retriever.
"""

from __future__ import annotations

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from . import lexical
from .corpus import Example
from .gateway import GatewayError, GenerationParams, Generator, Scorer
from .prompts import render_prompt
from .util import parallel_map, read_ldjson, write_ldjson_line

logger = logging.getLogger(__name__)

SCORER_KINDS = ("probability", "match_bleu")
BLEU_SMOOTHING_EPS = 1e-9


@dataclass(frozen=True)
class ScoredCandidate:
    candidate_id: str
    score: float
    scorer_kind: str = "probability"

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError(f"candidate {self.candidate_id!r} has non-finite score {self.score}")
        if self.scorer_kind not in SCORER_KINDS:
            raise ValueError(f"unknown scorer_kind {self.scorer_kind!r}")


@dataclass(frozen=True)
class LabeledAnchor:
    """An anchor with its ranked positive and negative candidate sets."""

    anchor_id: str
    stage_one_ids: tuple[str, ...]
    positives: tuple[ScoredCandidate, ...]
    negatives: tuple[ScoredCandidate, ...]
    scorer_kind: str = "probability"

    def __post_init__(self) -> None:
        pos_ids = {c.candidate_id for c in self.positives}
        neg_ids = {c.candidate_id for c in self.negatives}
        if pos_ids & neg_ids:
            raise ValueError(f"anchor {self.anchor_id!r}: positives and negatives overlap")
        if self.anchor_id in self.stage_one_ids:
            raise ValueError(f"anchor {self.anchor_id!r} appears in its own stage-one set")
        if self.positives and self.negatives:
            if min(c.score for c in self.positives) < max(c.score for c in self.negatives):
                raise ValueError(f"anchor {self.anchor_id!r}: a negative outscores a positive")


@dataclass(frozen=True)
class LabelingConfig:
    t: int = 50
    z: int = 5
    v: int = 5
    scorer_kind: str = "probability"
    max_tokens: int = 500  # decode budget for match_bleu generation

    def __post_init__(self) -> None:
        if self.t < 1 or self.z < 1 or self.v < 1:
            raise ValueError("t, z and v must all be >= 1")
        if self.scorer_kind not in SCORER_KINDS:
            raise ValueError(f"unknown scorer_kind {self.scorer_kind!r}")


def one_shot_prompt(candidate: Example, anchor_requirement: str) -> str:
    """The conditioning context: one candidate shot, then the anchor requirement."""
    return render_prompt([(candidate.requirement, candidate.code)], anchor_requirement)


def metric_m(anchor: Example, candidate: Example, scorer: Scorer) -> float:
    """Length-normalized log-probability of the anchor's ground-truth code,
    conditioned on the candidate shot. Higher means the candidate helps more."""
    result = scorer.score_continuation(one_shot_prompt(candidate, anchor.requirement), anchor.code)
    return result.mean_logprob


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def smoothed_bleu4(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """BLEU-4 over token sequences: geometric mean of modified n-gram
    precisions (n=1..4, add-epsilon smoothed) times the brevity penalty."""
    if not hypothesis:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, 5):
        hyp_counts = _ngram_counts(hypothesis, n)
        ref_counts = _ngram_counts(reference, n)
        total = sum(hyp_counts.values())
        clipped = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
        log_precision_sum += 0.25 * math.log((clipped + BLEU_SMOOTHING_EPS) / (total + BLEU_SMOOTHING_EPS))
    brevity = min(1.0, math.exp(1.0 - len(reference) / len(hypothesis)))
    return brevity * math.exp(log_precision_sum)


def match_bleu(anchor: Example, candidate: Example, generator: Generator, max_tokens: int = 500) -> float:
    """Estimate a candidate by greedily generating one program from the
    one-shot prompt and BLEU-scoring it against the anchor's ground truth."""
    params = GenerationParams(temperature=0.0, top_p=1.0, max_tokens=max_tokens, n_samples=1)
    generated = generator.generate(one_shot_prompt(candidate, anchor.requirement), params)[0]
    return smoothed_bleu4(lexical.tokenize(generated), lexical.tokenize(anchor.code))


def label_anchor(
    anchor_id: str,
    scored: Sequence[ScoredCandidate],
    z: int,
    v: int,
    stage_one_ids: Sequence[str] | None = None,
) -> LabeledAnchor:
    """Rank scored candidates (score descending, ties by id ascending) and take
    the first z as positives and the last v as negatives."""
    if z < 1 or v < 1:
        raise ValueError("z and v must be >= 1")
    if z + v > len(scored):
        raise ValueError(f"anchor {anchor_id!r}: z + v = {z + v} exceeds {len(scored)} scored candidates")
    ranked = sorted(scored, key=lambda c: (-c.score, c.candidate_id))
    scorer_kind = ranked[0].scorer_kind
    return LabeledAnchor(
        anchor_id=anchor_id,
        stage_one_ids=tuple(stage_one_ids if stage_one_ids is not None else (c.candidate_id for c in scored)),
        positives=tuple(ranked[:z]),
        negatives=tuple(ranked[-v:]),
        scorer_kind=scorer_kind,
    )


def _score_anchor(
    anchor: Example,
    pool_by_id: dict[str, Example],
    stage_one: Sequence[str],
    cfg: LabelingConfig,
    scorer: Scorer | None,
    generator: Generator | None,
) -> tuple[LabeledAnchor | None, int]:
    scored: list[ScoredCandidate] = []
    gateway_failures = 0
    for candidate_id in stage_one:
        candidate = pool_by_id[candidate_id]
        try:
            if cfg.scorer_kind == "probability":
                value = metric_m(anchor, candidate, scorer)
            else:
                value = match_bleu(anchor, candidate, generator, max_tokens=cfg.max_tokens)
        except GatewayError as exc:
            logger.warning("anchor %s: scoring candidate %s failed (%s); excluded", anchor.id, candidate_id, exc)
            gateway_failures += 1
            continue
        scored.append(ScoredCandidate(candidate_id=candidate_id, score=value, scorer_kind=cfg.scorer_kind))
    if len(scored) < cfg.z + cfg.v:
        logger.warning(
            "anchor %s: only %d of %d candidates scored (< z + v = %d); anchor dropped",
            anchor.id, len(scored), len(stage_one), cfg.z + cfg.v,
        )
        return None, gateway_failures
    return label_anchor(anchor.id, scored, cfg.z, cfg.v, stage_one_ids=stage_one), gateway_failures


def build_labeled_dataset(
    pool: Sequence[Example],
    cfg: LabelingConfig,
    scorer: Scorer | None = None,
    generator: Generator | None = None,
    labels_path: str | None = None,
    resume: bool = True,
    max_workers: int = 1,
) -> list[LabeledAnchor]:
    """Run the full two-stage procedure over every pool example.

    Labels are appended to `labels_path` (when given) as each chunk of anchors
    completes, in pool order; a rerun with `resume` skips anchors already in
    the file. Per-candidate scoring failures exclude the candidate; anchors
    left with fewer than z + v scored candidates are dropped with a warning.
    """
    if cfg.scorer_kind == "probability" and scorer is None:
        raise ValueError("scorer_kind 'probability' requires a scorer")
    if cfg.scorer_kind == "match_bleu" and generator is None:
        raise ValueError("scorer_kind 'match_bleu' requires a generator")
    pool_by_id = {ex.id: ex for ex in pool}
    index = lexical.build_index((ex.id, ex.requirement) for ex in pool)

    done: dict[str, LabeledAnchor] = {}
    if labels_path and resume and os.path.exists(labels_path):
        done = {la.anchor_id: la for la in read_labels(labels_path)}
        if done:
            logger.info("resuming labeling: %d anchor(s) already in %s", len(done), labels_path)

    pending = [ex for ex in pool if ex.id not in done]

    def task(anchor: Example) -> tuple[LabeledAnchor | None, int]:
        stage_one = lexical.top_t(index, lexical.tokenize(anchor.requirement), cfg.t, exclude={anchor.id})
        return _score_anchor(anchor, pool_by_id, stage_one, cfg, scorer, generator)

    newly_labeled = 0
    total_gateway_failures = 0
    out_fh = open(labels_path, "a", encoding="utf-8") if labels_path else None
    try:
        chunk_size = max(1, max_workers * 4)
        for start in range(0, len(pending), chunk_size):
            chunk = pending[start : start + chunk_size]
            for anchor, (labeled, failures) in zip(chunk, parallel_map(task, chunk, max_workers=max_workers)):
                total_gateway_failures += failures
                if labeled is None:
                    continue
                done[anchor.id] = labeled
                newly_labeled += 1
                if out_fh is not None:
                    write_ldjson_line(out_fh, labeled_anchor_to_record(labeled))
                    out_fh.flush()
    finally:
        if out_fh is not None:
            out_fh.close()

    if pending and newly_labeled == 0 and total_gateway_failures > 0:
        raise GatewayError(
            f"scoring failed for all {len(pending)} pending anchor(s) "
            f"({total_gateway_failures} provider error(s)); nothing labeled"
        )
    return [done[ex.id] for ex in pool if ex.id in done]


def labeled_anchor_to_record(labeled: LabeledAnchor) -> dict:
    return {
        "anchor_id": labeled.anchor_id,
        "scorer_kind": labeled.scorer_kind,
        "stage_one": list(labeled.stage_one_ids),
        "positives": [{"id": c.candidate_id, "score": c.score} for c in labeled.positives],
        "negatives": [{"id": c.candidate_id, "score": c.score} for c in labeled.negatives],
    }


def labeled_anchor_from_record(record: dict) -> LabeledAnchor:
    kind = record["scorer_kind"]
    return LabeledAnchor(
        anchor_id=record["anchor_id"],
        stage_one_ids=tuple(record["stage_one"]),
        positives=tuple(ScoredCandidate(c["id"], c["score"], kind) for c in record["positives"]),
        negatives=tuple(ScoredCandidate(c["id"], c["score"], kind) for c in record["negatives"]),
        scorer_kind=kind,
    )


def read_labels(path: str) -> list[LabeledAnchor]:
    labels = []
    for lineno, record in read_ldjson(path):
        try:
            labels.append(labeled_anchor_from_record(record))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad label record: {exc}") from exc
    return labels


def write_labels(path: str, labels: Sequence[LabeledAnchor]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for labeled in labels:
            write_ldjson_line(fh, labeled_anchor_to_record(labeled))
