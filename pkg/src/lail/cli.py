"""Command-line pipeline driver.

One JSON config describes the whole run; each subcommand reads its section,
consumes upstream artifacts from the output directory, and writes its own.
Outputs embed a config hash and the tool version, so rerunning an unchanged
stage is a no-op with a "cached" notice.

Exit codes: 0 success, 1 config error, 2 upstream artifact missing,
3 provider failure after retries.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__, evaluation, labeling, lexical, selection, training
from .corpus import Dataset, DatasetError, candidate_pool, load_dataset, load_split, validate_dataset
from .gateway import (
    GatewayError,
    GenerationParams,
    ProviderConfig,
    RetryPolicy,
    build_provider,
)
from .selection import FingerprintMismatch, SelectionContext
from .util import canonical_json, read_ldjson, stable_u64, write_ldjson_line

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("validate", "label", "train", "index", "retrieve", "eval", "report", "transfer-eval")

INDEX_FORMAT = "lail-index-v1"


class ConfigError(Exception):
    pass


class UpstreamMissing(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 (not argparse's 2) on bad usage
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "dataset": {"name": "dataset", "language_tag": "python", "root": ".", "splits": {}},
    "providers": {
        "scorer": {"kind": "mock_scorer"},
        "generator": {"kind": "mock_generator"},
        "embedder": {"kind": "hash_embedder", "dim": 256},
    },
    "labeling": {"t": 50, "z": 5, "v": 5, "scorer_kind": "probability", "max_tokens": 500},
    "training": {
        "tau": 0.07,
        "negatives_total": 64,
        "tau_ne": 1,
        "learning_rate": 5e-5,
        "batch_size": 32,
        "epochs": 10,
        "d_out": 128,
        "use_bias": True,
        "denominator_includes_positive": True,
    },
    "selection": {"r": 3, "shot_order": "asc", "strategies": ["retriever", "random", "bm25"]},
    "eval": {
        "k": [1, 3, 5],
        "n_samples": 5,
        "temperature": 0.8,
        "top_p": 0.95,
        "max_tokens": 500,
        "verdict_provider": "external_file",
        "verdict_dir": None,
        "runner_cmd": None,
        "timeout": 10.0,
        "max_procs": 1,
        "baseline": "random",
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_sets(config: dict, sets: Sequence[str]) -> dict:
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw_value = item.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = config
        keys = dotted.split(".")
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                node[key] = {}
            node = node[key]
        node[keys[-1]] = value
    return config


class Pipeline:
    """Resolved configuration plus lazily constructed shared objects."""

    def __init__(self, config_path: str, sets: Sequence[str] = ()):
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                user_config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON: {exc}") from exc
        if not isinstance(user_config, dict):
            raise ConfigError(f"{config_path}: config must be a JSON object")
        self.config = _apply_sets(_merge(DEFAULT_CONFIG, user_config), sets)
        self.base_dir = os.path.dirname(os.path.abspath(config_path))
        self._dataset: Dataset | None = None
        for k in self.config["eval"]["k"]:
            if k > self.config["eval"]["n_samples"]:
                raise ConfigError(f"eval.k value {k} exceeds eval.n_samples {self.config['eval']['n_samples']}")
        r = self.config["selection"]["r"]
        if not isinstance(r, int) or not 1 <= r <= 16:
            raise ConfigError(f"selection.r must be an integer in [1, 16], got {r!r}")

    # -- paths ------------------------------------------------------------

    def path(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.base_dir, rel)

    @property
    def out_dir(self) -> str:
        out = self.path(self.config["output_dir"])
        os.makedirs(out, exist_ok=True)
        return out

    def artifact(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    # -- shared objects -----------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    def substream_seed(self, name: str) -> int:
        return stable_u64(self.seed, name)

    def dataset(self) -> Dataset:
        if self._dataset is None:
            section = self.config["dataset"]
            splits = section.get("splits") or {}
            if not splits:
                raise ConfigError("dataset.splits is empty")
            root = self.path(section.get("root", "."))
            for split_name, rel in splits.items():
                if not os.path.exists(os.path.join(root, rel)):
                    raise UpstreamMissing(f"dataset split file missing: {os.path.join(root, rel)}")
            try:
                self._dataset = load_dataset(
                    root, splits, name=section.get("name", "dataset"),
                    language_tag=section.get("language_tag", "python"),
                )
            except DatasetError as exc:
                raise ConfigError(str(exc)) from exc
        return self._dataset

    def provider_config(self, role: str) -> ProviderConfig:
        raw = self.config["providers"].get(role)
        if not isinstance(raw, dict):
            raise ConfigError(f"providers.{role} is not configured")
        raw = dict(raw)
        retry = raw.pop("retry", None)
        try:
            if retry is not None:
                raw["retry"] = RetryPolicy(**retry)
            return ProviderConfig(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"providers.{role}: {exc}") from exc

    def provider(self, role: str, pool=None):
        return build_provider(self.provider_config(role), pool=pool)

    def pool_embeddings(self, pool, embedder) -> dict:
        return training.ensure_pool_embeddings(
            pool, embedder,
            cache_path=self.artifact("embeddings.jsonl"),
            meta=self.meta("embeddings"),
        )

    # -- provenance ---------------------------------------------------------

    def stage_hash(self, stage: str, extra: dict | None = None) -> str:
        payload = {"stage": stage, "config": self.config, "version": __version__}
        if extra:
            payload["extra"] = extra
        return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:32]

    def meta(self, stage: str, extra: dict | None = None) -> dict:
        return {"stage": stage, "config_hash": self.stage_hash(stage, extra), "tool_version": __version__}


# ---------------------------------------------------------------------------
# Artifact state: cached / resumable / stale
# ---------------------------------------------------------------------------


def _ldjson_state(path: str, expected_hash: str) -> str:
    """One of 'absent', 'stale', 'resume', 'cached' for an LDJSON artifact."""
    if not os.path.exists(path):
        return "absent"
    first = last = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if first is None:
                first = line
            last = line
    if first is None:
        return "stale"
    try:
        head = json.loads(first)
    except json.JSONDecodeError:
        return "stale"
    meta = head.get("_meta") or {}
    if meta.get("config_hash") != expected_hash:
        return "stale"
    try:
        tail = json.loads(last)
    except json.JSONDecodeError:
        return "resume"
    if isinstance(tail, dict) and (tail.get("_meta") or {}).get("complete"):
        return "cached"
    return "resume"


def _begin_ldjson(path: str, meta: dict, state: str) -> None:
    if state in ("stale",) and os.path.exists(path):
        os.unlink(path)
    if state in ("absent", "stale"):
        with open(path, "w", encoding="utf-8") as fh:
            write_ldjson_line(fh, {"_meta": meta})


def _finish_ldjson(path: str, meta: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        write_ldjson_line(fh, {"_meta": {"complete": True, "config_hash": meta["config_hash"]}})


def _json_doc_state(path: str, expected_hash: str) -> str:
    if not os.path.exists(path):
        return "absent"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, OSError):
        return "stale"
    meta = doc.get("_meta") or {}
    return "cached" if meta.get("config_hash") == expected_hash else "stale"


def _notice_cached(stage: str, path: str) -> None:
    print(f"cached: {stage} is up to date ({path})")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_validate(pipe: Pipeline, args) -> int:
    # load splits without the load-time validation raise so every finding
    # gets reported, not just the first ten
    section = pipe.config["dataset"]
    splits = section.get("splits") or {}
    if not splits:
        raise ConfigError("dataset.splits is empty")
    root = pipe.path(section.get("root", "."))
    loaded = {}
    for split_name, rel in splits.items():
        path = os.path.join(root, rel)
        if not os.path.exists(path):
            raise UpstreamMissing(f"dataset split file missing: {path}")
        try:
            loaded[split_name] = load_split(path)
        except DatasetError as exc:
            raise ConfigError(str(exc)) from exc
    dataset = Dataset(
        name=section.get("name", "dataset"),
        language_tag=section.get("language_tag", "python"),
        train=loaded.get("train", ()),
        dev=loaded.get("dev", ()),
        test=loaded.get("test", ()),
    )
    findings = validate_dataset(dataset)
    for finding in findings:
        print(f"{finding.example_id}: {finding.problem}")
    sizes = {name: len(split) for name, split in dataset.splits.items()}
    if findings:
        print(f"dataset '{dataset.name}': {len(findings)} finding(s), sizes {sizes}")
        return 1
    print(f"dataset '{dataset.name}' ok: {sizes}")
    return 0


def cmd_label(pipe: Pipeline, args) -> int:
    cfg_raw = pipe.config["labeling"]
    try:
        cfg = labeling.LabelingConfig(**cfg_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"labeling: {exc}") from exc
    pool = candidate_pool(pipe.dataset())
    path = pipe.artifact("labels.jsonl")
    meta = pipe.meta("label")
    state = _ldjson_state(path, meta["config_hash"])
    if state == "cached":
        _notice_cached("label", path)
        return 0
    scorer = pipe.provider("scorer") if cfg.scorer_kind == "probability" else None
    generator = pipe.provider("generator") if cfg.scorer_kind == "match_bleu" else None
    provider_role = "scorer" if cfg.scorer_kind == "probability" else "generator"
    _begin_ldjson(path, meta, state)
    labels = labeling.build_labeled_dataset(
        pool, cfg, scorer=scorer, generator=generator, labels_path=path, resume=True,
        max_workers=pipe.provider_config(provider_role).max_concurrent_requests,
    )
    _finish_ldjson(path, meta)
    print(f"labeled {len(labels)} of {len(pool)} anchors -> {path}")
    return 0


def _train_config(pipe: Pipeline) -> training.TrainConfig:
    raw = dict(pipe.config["training"])
    raw.setdefault("seed", pipe.substream_seed("train"))
    try:
        return training.TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from exc


def cmd_train(pipe: Pipeline, args) -> int:
    labels_path = pipe.artifact("labels.jsonl")
    if not os.path.exists(labels_path):
        raise UpstreamMissing(f"labels file missing: {labels_path} (run `lail label` first)")
    ckpt_path = pipe.artifact("checkpoint.json")
    meta = pipe.meta("train")
    if _json_doc_state(ckpt_path, meta["config_hash"]) == "cached":
        _notice_cached("train", ckpt_path)
        return 0
    labels = labeling.read_labels(labels_path)
    pool = candidate_pool(pipe.dataset())
    embedder = pipe.provider("embedder")
    checkpoint = training.train_retriever(
        labels, pool, embedder, _train_config(pipe),
        source_dataset=pipe.dataset().name,
        cache_path=pipe.artifact("embeddings.jsonl"),
        cache_meta=pipe.meta("embeddings"),
    )
    training.save_checkpoint(ckpt_path, checkpoint, meta=meta)
    losses = ", ".join(f"{x:.4f}" for x in checkpoint.epoch_mean_losses)
    print(f"trained retriever ({len(labels)} anchors) -> {ckpt_path}; epoch losses: {losses}")
    return 0


def _load_checkpoint(pipe: Pipeline, args) -> tuple[training.RetrieverCheckpoint, str]:
    path = getattr(args, "checkpoint", None) or pipe.artifact("checkpoint.json")
    if not os.path.exists(path):
        raise UpstreamMissing(f"checkpoint missing: {path} (run `lail train` first)")
    return training.load_checkpoint(path), path


def _save_index(path: str, index: selection.EmbeddingIndex, meta: dict) -> None:
    doc = {
        "format": INDEX_FORMAT,
        "ids": list(index.ids),
        "vectors": training._array_to_payload(index.vectors),
        "checkpoint_fingerprint": index.checkpoint_fingerprint,
        "_meta": meta,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_index(path: str) -> selection.EmbeddingIndex:
    if not os.path.exists(path):
        raise UpstreamMissing(f"embedding index missing: {path} (run `lail index` first)")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != INDEX_FORMAT:
        raise ConfigError(f"{path}: not a {INDEX_FORMAT} file")
    return selection.EmbeddingIndex(
        ids=tuple(doc["ids"]),
        vectors=training._array_from_payload(doc["vectors"]),
        checkpoint_fingerprint=doc["checkpoint_fingerprint"],
    )


def cmd_index(pipe: Pipeline, args) -> int:
    checkpoint, ckpt_path = _load_checkpoint(pipe, args)
    path = pipe.artifact("index.json")
    meta = pipe.meta("index", extra={"checkpoint": checkpoint.fingerprint()})
    if _json_doc_state(path, meta["config_hash"]) == "cached":
        _notice_cached("index", path)
        return 0
    pool = candidate_pool(pipe.dataset())
    embedder = pipe.provider("embedder")
    embeddings = pipe.pool_embeddings(pool, embedder)
    index = selection.build_embedding_index(
        pool, embedder, checkpoint, force=getattr(args, "force_fingerprint", False), embeddings=embeddings
    )
    _save_index(path, index, meta)
    print(f"indexed {len(index.ids)} pool examples from {ckpt_path} -> {path}")
    return 0


def _strategies(pipe: Pipeline, args) -> list[str]:
    if getattr(args, "strategies", None):
        return [s.strip() for s in args.strategies.split(",") if s.strip()]
    return list(pipe.config["selection"]["strategies"])


def _build_selector(pipe: Pipeline, strategy: str, args) -> selection.Selector:
    pool = candidate_pool(pipe.dataset())
    r = int(pipe.config["selection"]["r"])
    if strategy == "retriever":
        checkpoint, _ = _load_checkpoint(pipe, args)
        index = _load_index(pipe.artifact("index.json"))
        embedder = pipe.provider("embedder")
        return selection.make_retriever_selector(
            index, checkpoint, embedder, r, force=getattr(args, "force_fingerprint", False)
        )
    context = SelectionContext(seed=pipe.substream_seed("selection"))
    if strategy == "bm25":
        context.bm25 = lexical.build_index((ex.id, ex.requirement) for ex in pool)
    elif strategy == "embed_topk":
        embedder = pipe.provider("embedder")
        context.embedder = embedder
        embeddings = pipe.pool_embeddings(pool, embedder)
        context.raw_ids = tuple(ex.id for ex in pool)
        context.raw_vectors = np.stack([embeddings[ex.id] for ex in pool])
    elif strategy == "uncertainty":
        context.scorer = pipe.provider("scorer")
    elif strategy != "random":
        raise ConfigError(f"unknown selection strategy {strategy!r}")
    return selection.make_baseline_selector(strategy, pool, r, context)


def cmd_retrieve(pipe: Pipeline, args) -> int:
    testset = pipe.dataset().test
    if not testset:
        raise ConfigError("dataset has no test split to retrieve for")
    for strategy in _strategies(pipe, args):
        path = pipe.artifact(f"selections_{strategy}.jsonl")
        meta = pipe.meta("retrieve", extra={"strategy": strategy})
        if _ldjson_state(path, meta["config_hash"]) == "cached":
            _notice_cached(f"retrieve[{strategy}]", path)
            continue
        selector = _build_selector(pipe, strategy, args)
        _begin_ldjson(path, meta, "stale")
        with open(path, "a", encoding="utf-8") as fh:
            for test_example in testset:
                shots = selector(test_example)
                write_ldjson_line(
                    fh,
                    {
                        "test_id": test_example.id,
                        "strategy": strategy,
                        "shots": [{"id": shot_id, "similarity": sim} for shot_id, sim in shots],
                    },
                )
        _finish_ldjson(path, meta)
        print(f"selected shots for {len(testset)} test items [{strategy}] -> {path}")
    return 0


def _replay_selector(path: str) -> selection.Selector:
    table: dict[str, list[tuple[str, float]]] = {}
    for _, record in read_ldjson(path):
        table[record["test_id"]] = [(shot["id"], float(shot["similarity"])) for shot in record["shots"]]

    def select(test_example):
        if test_example.id not in table:
            raise UpstreamMissing(f"{path}: no selection recorded for test {test_example.id!r}")
        return table[test_example.id]

    return select


def _generation_params(pipe: Pipeline) -> GenerationParams:
    eval_cfg = pipe.config["eval"]
    try:
        return GenerationParams(
            temperature=float(eval_cfg["temperature"]),
            top_p=float(eval_cfg["top_p"]),
            max_tokens=int(eval_cfg["max_tokens"]),
            n_samples=int(eval_cfg["n_samples"]),
            seed=pipe.substream_seed("generate") % (2**31),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"eval generation params: {exc}") from exc


def _verdict_path(pipe: Pipeline, strategy: str) -> str:
    verdict_dir = pipe.config["eval"].get("verdict_dir")
    base = pipe.path(verdict_dir) if verdict_dir else pipe.out_dir
    return os.path.join(base, f"verdicts_{strategy}.jsonl")


def _eval_generate(pipe: Pipeline, strategy: str, args) -> list[evaluation.SampleRecord]:
    testset = pipe.dataset().test
    pool = candidate_pool(pipe.dataset())
    params = _generation_params(pipe)

    selections_path = pipe.artifact(f"selections_{strategy}.jsonl")
    if not os.path.exists(selections_path):
        raise UpstreamMissing(f"selections missing: {selections_path} (run `lail retrieve` first)")

    samples_path = pipe.artifact(f"samples_{strategy}.jsonl")
    samples_meta = pipe.meta("eval-generate", extra={"strategy": strategy})
    state = _ldjson_state(samples_path, samples_meta["config_hash"])
    if state == "cached":
        _notice_cached(f"eval-generate[{strategy}]", samples_path)
        return evaluation.read_samples(samples_path)
    generator = pipe.provider("generator")
    _begin_ldjson(samples_path, samples_meta, state)
    records, failures = evaluation.run_generation(
        testset,
        strategy,
        _replay_selector(selections_path),
        pool,
        generator,
        params,
        samples_path=samples_path,
        resume=True,
        shot_order=pipe.config["selection"]["shot_order"],
    )
    _finish_ldjson(samples_path, samples_meta)
    if failures and not records:
        raise GatewayError(
            f"all {len(failures)} generations failed; first: {next(iter(failures.values()))}"
        )
    if failures:
        print(f"warning: generation failed for {len(failures)} test item(s): {sorted(failures)[:5]}...")
    print(f"generated {len(records)} samples [{strategy}] -> {samples_path}")
    return records


def _eval_report(pipe: Pipeline, strategy: str, records: list[evaluation.SampleRecord], args) -> int:
    eval_cfg = pipe.config["eval"]
    testset = pipe.dataset().test
    params = _generation_params(pipe)

    provider = eval_cfg["verdict_provider"]
    if provider == "subprocess_runner" and not getattr(args, "i_understand_execution_risk", False):
        raise ConfigError(
            "verdict_provider=subprocess_runner executes generated code; "
            "pass --i-understand-execution-risk to enable it"
        )
    verdict_path = _verdict_path(pipe, strategy)
    if provider == "external_file" and not os.path.exists(verdict_path):
        raise UpstreamMissing(
            f"verdict file missing: {verdict_path} (samples are written; judge them, then rerun `lail eval`)"
        )
    try:
        verdicts = evaluation.obtain_verdicts(
            records,
            provider=provider,
            verdict_path=verdict_path,
            testset=testset,
            runner_cmd=eval_cfg.get("runner_cmd"),
            timeout=float(eval_cfg.get("timeout", evaluation.DEFAULT_RUN_TIMEOUT)),
            max_procs=int(eval_cfg.get("max_procs", 1)),
        )
    except ValueError as exc:
        raise UpstreamMissing(str(exc)) from exc
    report = evaluation.evaluate(
        records,
        verdicts,
        ks=[int(k) for k in eval_cfg["k"]],
        strategy=strategy,
        config={
            "n_samples": params.n_samples,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "shot_count": pipe.config["selection"]["r"],
            "shot_order": pipe.config["selection"]["shot_order"],
            "dataset": pipe.dataset().name,
        },
    )
    report_path = pipe.artifact(f"report_{strategy}.json")
    doc = report.to_dict()
    doc["_meta"] = pipe.meta("eval-report", extra={"strategy": strategy})
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    shown = ", ".join(f"Pass@{k}={v:.4f}" for k, v in sorted(report.pass_at.items()))
    print(f"report [{strategy}]: {shown} over {report.n_test} tests -> {report_path}")
    return 0


def cmd_eval(pipe: Pipeline, args) -> int:
    strategies = _strategies(pipe, args)
    # generate everything first so a missing verdict file (exit 2) still
    # leaves every strategy's samples on disk for judging
    records = {strategy: _eval_generate(pipe, strategy, args) for strategy in strategies}
    for strategy in strategies:
        code = _eval_report(pipe, strategy, records[strategy], args)
        if code != 0:
            return code
    return 0


def cmd_report(pipe: Pipeline, args) -> int:
    reports = []
    for strategy in _strategies(pipe, args):
        path = pipe.artifact(f"report_{strategy}.json")
        if not os.path.exists(path):
            raise UpstreamMissing(f"report missing: {path} (run `lail eval` first)")
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(evaluation.EvalReport.from_dict(json.load(fh)))
    baseline = getattr(args, "baseline", None) or pipe.config["eval"].get("baseline")
    if baseline not in {report.strategy for report in reports}:
        baseline = reports[0].strategy
    try:
        document = evaluation.compare_report(reports, baseline=baseline)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    doc = document.to_dict()
    doc["_meta"] = pipe.meta("report")
    with open(pipe.artifact("comparison.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(pipe.artifact("comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(document.text + "\n")
    print(document.text)
    return 0


def cmd_transfer_eval(pipe: Pipeline, args) -> int:
    """Index + retrieve + eval against this config's dataset, using a
    checkpoint trained elsewhere. No retraining happens here."""
    checkpoint, ckpt_path = _load_checkpoint(pipe, args)
    pool = candidate_pool(pipe.dataset())
    testset = pipe.dataset().test
    if not testset:
        raise ConfigError("dataset has no test split to evaluate on")
    embedder = pipe.provider("embedder")
    force = getattr(args, "force_fingerprint", False)
    ckpt_hash = checkpoint.fingerprint()

    index_path = pipe.artifact("index_transfer.json")
    index_meta = pipe.meta("transfer-index", extra={"checkpoint": ckpt_hash})
    if _json_doc_state(index_path, index_meta["config_hash"]) == "cached":
        _notice_cached("transfer-index", index_path)
        index = _load_index(index_path)
    else:
        embeddings = pipe.pool_embeddings(pool, embedder)
        index = selection.build_embedding_index(pool, embedder, checkpoint, force=force, embeddings=embeddings)
        _save_index(index_path, index, index_meta)
        print(f"transfer: indexed {len(index.ids)} pool examples from {ckpt_path}")

    strategy = "transfer"
    selections_path = pipe.artifact(f"selections_{strategy}.jsonl")
    sel_meta = pipe.meta("transfer-retrieve", extra={"checkpoint": ckpt_hash})
    if _ldjson_state(selections_path, sel_meta["config_hash"]) == "cached":
        _notice_cached("transfer-retrieve", selections_path)
    else:
        selector = selection.make_retriever_selector(
            index, checkpoint, embedder, int(pipe.config["selection"]["r"]), force=force
        )
        _begin_ldjson(selections_path, sel_meta, "stale")
        with open(selections_path, "a", encoding="utf-8") as fh:
            for test_example in testset:
                shots = selector(test_example)
                write_ldjson_line(
                    fh,
                    {
                        "test_id": test_example.id,
                        "strategy": strategy,
                        "shots": [{"id": shot_id, "similarity": sim} for shot_id, sim in shots],
                    },
                )
        _finish_ldjson(selections_path, sel_meta)
        print(f"transfer: selected shots for {len(testset)} test items -> {selections_path}")

    records = _eval_generate(pipe, strategy, args)
    return _eval_report(pipe, strategy, records, args)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="lail", description=__doc__)
    parser.add_argument("--version", action="version", version=f"lail {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="|".join(SUBCOMMANDS))

    def add(name, func, **extra_flags):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (value parsed as JSON when possible)")
        for flag, kwargs in extra_flags.items():
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=func)
        return p

    add("validate", cmd_validate)
    add("label", cmd_label)
    add("train", cmd_train)
    add("index", cmd_index,
        **{"--checkpoint": dict(default=None), "--force-fingerprint": dict(action="store_true")})
    add("retrieve", cmd_retrieve,
        **{"--checkpoint": dict(default=None), "--strategies": dict(default=None),
           "--force-fingerprint": dict(action="store_true")})
    add("eval", cmd_eval,
        **{"--strategies": dict(default=None),
           "--shot-order": dict(dest="shot_order", choices=selection.SHOT_ORDERS, default=None),
           "--i-understand-execution-risk": dict(action="store_true")})
    add("report", cmd_report, **{"--strategies": dict(default=None), "--baseline": dict(default=None)})
    add("transfer-eval", cmd_transfer_eval,
        **{"--checkpoint": dict(required=True), "--force-fingerprint": dict(action="store_true"),
           "--i-understand-execution-risk": dict(action="store_true")})
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("LAIL_LOG_LEVEL", "WARNING"))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        sets = list(args.set)
        if getattr(args, "shot_order", None):
            sets.append(f'selection.shot_order="{args.shot_order}"')
        pipe = Pipeline(args.config, sets=sets)
        return args.func(pipe, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except UpstreamMissing as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 2
    except FingerprintMismatch as exc:
        print(f"config error: {exc} (pass --force-fingerprint to override)", file=sys.stderr)
        return 1
    except GatewayError as exc:
        print(f"provider failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
