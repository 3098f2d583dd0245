from __future__ import annotations

import math
from collections import Counter

import pytest

from lail.corpus import Example
from lail.gateway import GatewayError, MockGenerator, MockScorer
from lail.labeling import (
    LabeledAnchor,
    LabelingConfig,
    ScoredCandidate,
    build_labeled_dataset,
    label_anchor,
    labeled_anchor_from_record,
    labeled_anchor_to_record,
    match_bleu,
    metric_m,
    read_labels,
    smoothed_bleu4,
    write_labels,
)
from lail.lexical import token_jaccard


def _ex(i, requirement, code):
    return Example(f"e{i}", requirement, code)


class TestMetricM:
    def test_probability_one_gives_zero(self):
        anchor = _ex(1, "anchor req", "alpha beta")
        candidate = _ex(2, "cand req", "alpha beta")  # identical code -> J = 1
        assert metric_m(anchor, candidate, MockScorer()) == pytest.approx(0.0, abs=1e-12)

    def test_two_half_probability_tokens(self):
        class TwoTokenScorer:
            def score_continuation(self, prompt, continuation):
                from lail.gateway import ScoreResult
                return ScoreResult((math.log(0.5), math.log(0.5)), 2)

        value = metric_m(_ex(1, "r", "c"), _ex(2, "r2", "c2"), TwoTokenScorer())
        assert value == pytest.approx(math.log(0.5), abs=1e-12)

    def test_mock_jaccard_half(self):
        anchor = _ex(1, "anchor req", "alpha beta")
        candidate = _ex(2, "cand req", "alpha gamma")  # J = 1/3... craft J=0.5 instead
        candidate = _ex(2, "cand req", "alpha beta gamma delta")
        # J(["alpha","beta","gamma","delta"], ["alpha","beta"]) = 2/4 = 0.5
        value = metric_m(anchor, candidate, MockScorer())
        assert value == pytest.approx(math.log(0.505), abs=1e-9)


class TestBleu:
    def test_identical_is_one(self):
        assert smoothed_bleu4(list("abcdef"), list("abcdef")) == 1.0

    def test_disjoint_is_smoothing_floor(self):
        value = smoothed_bleu4(["x", "y", "z"], ["a", "b", "c"])
        assert 0.0 < value < 1e-6

    def test_empty_hypothesis_is_zero(self):
        assert smoothed_bleu4([], ["a"]) == 0.0

    def test_short_hypothesis_example(self):
        # brute-force n-gram evaluation of the stated formula
        hyp, ref = ["a", "b", "c", "d"], ["a", "b", "c", "d", "e"]
        eps = 1e-9
        log_sum = 0.0
        for n in range(1, 5):
            hyp_grams = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
            ref_grams = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
            clipped = sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
            total = sum(hyp_grams.values())
            log_sum += 0.25 * math.log((clipped + eps) / (total + eps))
        expected = min(1.0, math.exp(1 - len(ref) / len(hyp))) * math.exp(log_sum)
        assert smoothed_bleu4(hyp, ref) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(math.exp(-0.25), abs=1e-9)

    def test_match_bleu_uses_greedy_one_shot(self):
        pool = [Example("p1", "sort the numbers", "def srt(xs):\n    return sorted(xs)\n")]
        anchor = Example("a", "sort the numbers please", "def srt(xs):\n    return sorted(xs)\n")
        candidate = pool[0]
        # shot-driven mock generator returns the candidate's own code
        value = match_bleu(anchor, candidate, MockGenerator())
        assert value == pytest.approx(1.0, abs=1e-9)

    def test_match_bleu_penalizes_unrelated_candidates(self):
        anchor = Example("a", "compute factorial", "def fact(n):\n    return 1 if n < 2 else n * fact(n - 1)\n")
        unrelated = Example("u", "open a file", "with open(p) as fh:\n    data = fh.read()\n")
        related = Example("r", "compute factorial of n", "def fact(n):\n    return 1 if n < 2 else n * fact(n - 1)\n")
        gen = MockGenerator()
        assert match_bleu(anchor, related, gen) > match_bleu(anchor, unrelated, gen)


class TestLabelAnchor:
    def test_ranked_split(self):
        scored = [ScoredCandidate(f"c{i}", -0.1 * (i + 1)) for i in range(6)]
        labeled = label_anchor("anchor", scored, z=2, v=2)
        assert [c.candidate_id for c in labeled.positives] == ["c0", "c1"]
        assert [c.candidate_id for c in labeled.negatives] == ["c4", "c5"]

    def test_all_ties_split_by_id(self):
        scored = [ScoredCandidate(f"c{i}", -1.0) for i in (3, 0, 2, 1, 4)]
        labeled = label_anchor("anchor", scored, z=2, v=2)
        assert [c.candidate_id for c in labeled.positives] == ["c0", "c1"]
        assert [c.candidate_id for c in labeled.negatives] == ["c3", "c4"]

    def test_paper_default_sizes(self):
        scored = [ScoredCandidate(f"c{i:02d}", -float(i)) for i in range(50)]
        labeled = label_anchor("anchor", scored, z=5, v=5)
        assert len(labeled.positives) == 5 and len(labeled.negatives) == 5

    def test_z_plus_v_bound(self):
        scored = [ScoredCandidate("a", -1.0), ScoredCandidate("b", -2.0)]
        with pytest.raises(ValueError, match="exceeds"):
            label_anchor("anchor", scored, z=2, v=1)

    def test_invariants_enforced_on_construction(self):
        pos = (ScoredCandidate("p", -1.0),)
        neg = (ScoredCandidate("p", -2.0),)
        with pytest.raises(ValueError, match="overlap"):
            LabeledAnchor("a", ("p",), pos, neg)
        with pytest.raises(ValueError, match="stage-one"):
            LabeledAnchor("a", ("a", "b"), pos, (ScoredCandidate("n", -2.0),))
        with pytest.raises(ValueError, match="outscores"):
            LabeledAnchor("a", ("p", "n"), (ScoredCandidate("p", -3.0),), (ScoredCandidate("n", -2.0),))


def _clustered_pool():
    pool = []
    for c, codeword in enumerate(["alpha beta", "gamma delta", "epsilon zeta", "eta theta"]):
        for j in range(4):
            pool.append(
                Example(
                    f"p{c}{j}",
                    f"task {c} variant {j} shared words everywhere",
                    f"def f(x):\n    return {codeword.split()[0]}(x, {codeword.split()[1]}_{j})\n",
                )
            )
    return pool


class TestBuildLabeledDataset:
    def test_stage_one_clamps_to_pool(self):
        pool = _clustered_pool()[:8]
        labels = build_labeled_dataset(pool, LabelingConfig(t=50, z=2, v=2), scorer=MockScorer())
        assert len(labels) == 8
        for labeled in labels:
            assert len(labeled.stage_one_ids) == 7
            assert labeled.anchor_id not in labeled.stage_one_ids

    def test_positives_match_brute_force_jaccard(self):
        pool = _clustered_pool()
        z = v = 2
        labels = build_labeled_dataset(pool, LabelingConfig(t=50, z=z, v=v), scorer=MockScorer())
        by_id = {ex.id: ex for ex in pool}
        for labeled in labels:
            anchor = by_id[labeled.anchor_id]
            expected = sorted(
                labeled.stage_one_ids,
                key=lambda cid: (-token_jaccard(by_id[cid].code, anchor.code), cid),
            )[:z]
            assert [c.candidate_id for c in labeled.positives] == expected

    def test_rerun_is_byte_identical(self, tmp_path):
        pool = _clustered_pool()
        cfg = LabelingConfig(t=50, z=2, v=2)
        path_a, path_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        build_labeled_dataset(pool, cfg, scorer=MockScorer(), labels_path=str(path_a))
        build_labeled_dataset(pool, cfg, scorer=MockScorer(), labels_path=str(path_b))
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_resume_skips_completed_anchors(self, tmp_path):
        pool = _clustered_pool()
        cfg = LabelingConfig(t=50, z=2, v=2)
        path = tmp_path / "labels.jsonl"
        full = build_labeled_dataset(pool, cfg, scorer=MockScorer(), labels_path=str(path))
        # truncate to simulate an interrupted run
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[: len(lines) // 2]))

        calls = {"n": 0}

        class CountingScorer(MockScorer):
            def score_continuation(self, prompt, continuation):
                calls["n"] += 1
                return super().score_continuation(prompt, continuation)

        resumed = build_labeled_dataset(pool, cfg, scorer=CountingScorer(), labels_path=str(path))
        assert [la.anchor_id for la in resumed] == [la.anchor_id for la in full]
        assert resumed == full
        # only the missing half was rescored
        assert calls["n"] == sum(len(la.stage_one_ids) for la in full[len(lines) // 2:])

    def test_failed_candidates_excluded(self):
        pool = _clustered_pool()

        class FlakyScorer(MockScorer):
            def score_continuation(self, prompt, continuation):
                if "alpha" in prompt:  # candidate shots from cluster 0 always fail
                    raise GatewayError("simulated outage")
                return super().score_continuation(prompt, continuation)

        labels = build_labeled_dataset(pool, LabelingConfig(t=50, z=4, v=4), scorer=FlakyScorer())
        assert len(labels) == len(pool)  # enough survivors everywhere
        for labeled in labels:
            picked = {c.candidate_id for c in labeled.positives + labeled.negatives}
            assert not any(cid.startswith("p0") for cid in picked)

    def test_thin_anchors_dropped_with_warning(self, caplog):
        pool = _clustered_pool()

        class HalfDeadScorer(MockScorer):
            def score_continuation(self, prompt, continuation):
                # anchors from clusters 0 and 1 cannot be scored at all
                if "alpha" in continuation or "gamma" in continuation:
                    raise GatewayError("partial outage")
                return super().score_continuation(prompt, continuation)

        import logging

        with caplog.at_level(logging.WARNING, logger="lail.labeling"):
            labels = build_labeled_dataset(pool, LabelingConfig(t=50, z=6, v=6), scorer=HalfDeadScorer())
        # clusters 2 and 3 still label (12 scorable candidates = z + v)
        assert {la.anchor_id[:2] for la in labels} == {"p2", "p3"}
        assert any("dropped" in record.message for record in caplog.records)

    def test_total_outage_raises(self):
        class DeadScorer(MockScorer):
            def score_continuation(self, prompt, continuation):
                raise GatewayError("total outage")

        with pytest.raises(GatewayError, match="nothing labeled"):
            build_labeled_dataset(_clustered_pool(), LabelingConfig(t=50, z=2, v=2), scorer=DeadScorer())

    def test_match_bleu_kind_reuses_pipeline(self):
        pool = _clustered_pool()
        labels = build_labeled_dataset(
            pool, LabelingConfig(t=50, z=2, v=2, scorer_kind="match_bleu"), generator=MockGenerator()
        )
        assert all(la.scorer_kind == "match_bleu" for la in labels)
        # same-cluster candidates generate near-identical code -> top scores
        by_id = {ex.id: ex for ex in pool}
        for labeled in labels:
            top = labeled.positives[0]
            assert 0.0 <= top.score <= 1.0

    def test_requires_matching_provider(self):
        with pytest.raises(ValueError, match="requires a scorer"):
            build_labeled_dataset(_clustered_pool(), LabelingConfig(), scorer=None)
        with pytest.raises(ValueError, match="requires a generator"):
            build_labeled_dataset(_clustered_pool(), LabelingConfig(scorer_kind="match_bleu"))


def test_labels_file_round_trip(tmp_path):
    scored = [ScoredCandidate(f"c{i}", -0.5 * i - 0.25) for i in range(6)]
    labeled = label_anchor("anchor-1", scored, z=2, v=2)
    path = tmp_path / "labels.jsonl"
    write_labels(str(path), [labeled])
    assert read_labels(str(path)) == [labeled]
    record = labeled_anchor_to_record(labeled)
    assert labeled_anchor_from_record(record) == labeled
    assert set(record) == {"anchor_id", "scorer_kind", "stage_one", "positives", "negatives"}


def test_reference_scale_run_makes_expected_scorer_calls():
    # 384 anchors, stage-one of 50 -> 19,200 scorings
    pool = [
        Example(f"m{i:04d}", f"requirement {i} with shared filler words", f"def f{i}():\n    return {i}\n")
        for i in range(384)
    ]
    calls = {"n": 0}

    class CountingScorer(MockScorer):
        def score_continuation(self, prompt, continuation):
            calls["n"] += 1
            return super().score_continuation(prompt, continuation)

    labels = build_labeled_dataset(pool, LabelingConfig(t=50, z=5, v=5), scorer=CountingScorer())
    assert calls["n"] == 384 * 50 == 19200
    assert len(labels) == 384


def test_metric_m_no_cross_anchor_state():
    scorer = MockScorer()
    anchor1 = _ex(1, "first anchor", "alpha beta")
    anchor2 = _ex(2, "second anchor", "gamma delta")
    candidate = _ex(3, "cand", "alpha gamma")
    before = metric_m(anchor1, candidate, scorer)
    metric_m(anchor2, candidate, scorer)  # unrelated anchor scored in between
    assert metric_m(anchor1, candidate, scorer) == before
