from __future__ import annotations

import json
import os

import pytest

from lail import evaluation
from lail.cli import main
from lail.corpus import write_split
from synthdata import make_clustered_corpus


@pytest.fixture
def workdir(tmp_path):
    dataset, clusters = make_clustered_corpus(
        n_clusters=4, per_cluster=6, tests_per_cluster=2, seed=5, shared_code=True, name="cli-corpus"
    )
    write_split(str(tmp_path / "train.jsonl"), dataset.train)
    write_split(str(tmp_path / "test.jsonl"), dataset.test)
    config = {
        "seed": 11,
        "output_dir": "out",
        "dataset": {
            "name": "cli-corpus",
            "language_tag": "python",
            "root": ".",
            "splits": {"train": "train.jsonl", "test": "test.jsonl"},
        },
        "labeling": {"t": 10, "z": 2, "v": 2},
        "training": {"epochs": 2, "negatives_total": 8, "d_out": 16, "batch_size": 8},
        "selection": {"r": 2, "strategies": ["retriever", "random"]},
        "eval": {"k": [1, 2], "n_samples": 3, "baseline": "random"},
    }
    config_path = tmp_path / "cfg.json"
    config_path.write_text(json.dumps(config, indent=1))
    return tmp_path, str(config_path), dataset


def _write_exact_match_verdicts(tmp_path, dataset, strategies):
    truth = {ex.id: ex.code for ex in dataset.test}
    for strategy in strategies:
        samples = evaluation.read_samples(str(tmp_path / "out" / f"samples_{strategy}.jsonl"))
        evaluation.write_verdict_file(
            str(tmp_path / "out" / f"verdicts_{strategy}.jsonl"),
            [(r.test_id, r.sample_index, r.program == truth[r.test_id], "") for r in samples],
        )


def test_full_pipeline_and_caching(workdir, capsys):
    tmp_path, config, dataset = workdir
    for step in ("validate", "label", "train", "index", "retrieve"):
        assert main([step, "--config", config]) == 0, step
    assert main(["eval", "--config", config]) == 2  # verdicts not judged yet
    _write_exact_match_verdicts(tmp_path, dataset, ["retriever", "random"])
    assert main(["eval", "--config", config]) == 0
    assert main(["report", "--config", config]) == 0
    out = capsys.readouterr().out
    assert "retriever" in out and "random" in out

    # rerunning unchanged stages is a no-op with a cached notice
    for step in ("label", "train", "index", "retrieve"):
        assert main([step, "--config", config]) == 0
    cached_out = capsys.readouterr().out
    assert cached_out.count("cached:") >= 4

    report = json.loads((tmp_path / "out" / "report_retriever.json").read_text())
    assert report["_meta"]["tool_version"]
    assert 0.0 <= report["pass_at"]["1"] <= 1.0


def test_label_output_one_line_per_anchor(workdir):
    tmp_path, config, dataset = workdir
    assert main(["label", "--config", config]) == 0
    lines = [
        json.loads(line)
        for line in (tmp_path / "out" / "labels.jsonl").read_text().splitlines()
    ]
    anchors = [line for line in lines if "_meta" not in line]
    assert len(anchors) == len(dataset.train)
    assert {a["anchor_id"] for a in anchors} == {ex.id for ex in dataset.train}


def test_config_change_invalidates_cache(workdir):
    tmp_path, config, dataset = workdir
    assert main(["label", "--config", config]) == 0
    first = (tmp_path / "out" / "labels.jsonl").read_text()
    assert main(["label", "--config", config, "--set", "labeling.z=3"]) == 0
    second = (tmp_path / "out" / "labels.jsonl").read_text()
    assert first != second
    assert all(len(json.loads(l).get("positives", [1, 2, 3])) == 3 for l in second.splitlines())


def test_exit_codes(workdir, tmp_path_factory):
    tmp_path, config, dataset = workdir
    # 2: upstream artifact missing
    assert main(["train", "--config", config]) == 2
    assert main(["index", "--config", config]) == 2
    assert main(["eval", "--config", config]) == 2
    assert main(["report", "--config", config]) == 2
    # 1: config errors
    assert main(["label", "--config", str(tmp_path / "nope.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["label", "--config", str(bad)]) == 1
    assert main(["label", "--config", config, "--set", "labeling.z=0"]) == 1
    assert main(["label", "--config", config, "--set", 'labeling.scorer_kind="nope"']) == 1
    ks = tmp_path / "ks.json"
    ks.write_text(json.dumps({**json.loads(open(config).read()), "eval": {"k": [9], "n_samples": 3}}))
    assert main(["label", "--config", str(ks)]) == 1
    # unknown subcommand -> 1 with usage text
    assert main(["conjure", "--config", config]) == 1
    assert main([]) == 1


def test_provider_failure_exit_code(workdir):
    tmp_path, config, dataset = workdir
    # an http scorer pointing at a dead endpoint fails after retries -> exit 3
    assert (
        main([
            "label", "--config", config,
            "--set", 'providers.scorer={"kind":"http","endpoint":"http://127.0.0.1:9","model_name":"m","retry":{"max_attempts":1,"backoff_base":0.01},"timeout":0.5}',
        ])
        == 3
    )


def test_validate_reports_findings(tmp_path):
    records = [
        {"id": "a", "requirement": "req", "code": "code", "tests": []},
        {"id": "a", "requirement": "", "code": "code", "tests": []},
    ]
    with open(tmp_path / "train.jsonl", "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"dataset": {"splits": {"train": "train.jsonl"}}}))
    assert main(["validate", "--config", str(config)]) == 1


def test_subprocess_runner_gated(workdir):
    tmp_path, config, dataset = workdir
    for step in ("label", "train", "index", "retrieve"):
        assert main([step, "--config", config]) == 0
    rc = main([
        "eval", "--config", config,
        "--set", 'eval.verdict_provider="subprocess_runner"',
    ])
    assert rc == 1  # refused without the explicit risk flag
    rc = main([
        "eval", "--config", config, "--strategies", "retriever",
        "--set", 'eval.verdict_provider="subprocess_runner"',
        "--i-understand-execution-risk",
    ])
    assert rc == 0
    report = json.loads((tmp_path / "out" / "report_retriever.json").read_text())
    assert 0.0 <= report["pass_at"]["1"] <= 1.0


def test_transfer_eval(workdir, tmp_path_factory):
    tmp_path, config, dataset = workdir
    for step in ("label", "train"):
        assert main([step, "--config", config]) == 0
    checkpoint = str(tmp_path / "out" / "checkpoint.json")

    # corpus B with different themes, evaluated with the corpus-A checkpoint
    other = tmp_path_factory.mktemp("corpus_b")
    from synthdata import THEMES_B

    dataset_b, _ = make_clustered_corpus(
        n_clusters=4, per_cluster=6, tests_per_cluster=2, seed=6,
        themes=THEMES_B, shared_code=True, name="corpus-b", id_prefix="b-",
    )
    write_split(str(other / "train.jsonl"), dataset_b.train)
    write_split(str(other / "test.jsonl"), dataset_b.test)
    config_b = other / "cfg.json"
    config_b.write_text(json.dumps({
        "seed": 12,
        "output_dir": "out",
        "dataset": {"name": "corpus-b", "root": ".",
                    "splits": {"train": "train.jsonl", "test": "test.jsonl"}},
        "selection": {"r": 2, "strategies": ["retriever"]},
        "eval": {"k": [1, 2], "n_samples": 3},
    }))

    rc = main(["transfer-eval", "--config", str(config_b), "--checkpoint", checkpoint])
    assert rc == 2  # samples generated, verdicts wanted
    truth = {ex.id: ex.code for ex in dataset_b.test}
    samples = evaluation.read_samples(str(other / "out" / "samples_transfer.jsonl"))
    evaluation.write_verdict_file(
        str(other / "out" / "verdicts_transfer.jsonl"),
        [(r.test_id, r.sample_index, r.program == truth[r.test_id], "") for r in samples],
    )
    assert main(["transfer-eval", "--config", str(config_b), "--checkpoint", checkpoint]) == 0
    report = json.loads((other / "out" / "report_transfer.json").read_text())
    assert report["n_test"] == len(dataset_b.test)
    assert set(report["pass_at"]) == {"1", "2"}
    assert all(0.0 <= v <= 1.0 for v in report["pass_at"].values())
    # no retraining happened: the only checkpoint is corpus A's
    assert not os.path.exists(str(other / "out" / "checkpoint.json"))


def test_transfer_eval_missing_checkpoint(workdir):
    tmp_path, config, dataset = workdir
    assert main(["transfer-eval", "--config", config, "--checkpoint", str(tmp_path / "ghost.json")]) == 2


def test_shot_order_flag_changes_prompt_order(workdir):
    tmp_path, config, dataset = workdir
    for step in ("label", "train", "index"):
        assert main([step, "--config", config]) == 0
    assert main(["retrieve", "--config", config, "--strategies", "retriever"]) == 0
    sel = [json.loads(l) for l in (tmp_path / "out" / "selections_retriever.jsonl").read_text().splitlines()]
    sel = [s for s in sel if "_meta" not in s]
    sims = [shot["similarity"] for shot in sel[0]["shots"]]
    assert sims == sorted(sims, reverse=True)  # selections are stored ranked
