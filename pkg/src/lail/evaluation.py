"""Generation runs, verdict collection, and Pass@k reporting.

Pass@k here is the literal fraction of test requirements for which any of
the first k sampled programs passes all test cases. Verdicts come from an
external file by default; the subprocess runner executes untrusted generated
code and must be enabled explicitly.
"""

from __future__ import annotations

import logging
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

from .corpus import Example
from .gateway import GatewayError, GenerationParams, Generator
from .selection import Selector, assemble_prompt
from .util import parallel_map, read_ldjson, write_ldjson_line

logger = logging.getLogger(__name__)

VERDICT_PROVIDERS = ("external_file", "subprocess_runner")
DEFAULT_RUN_TIMEOUT = 10.0


@dataclass(frozen=True)
class SampleRecord:
    test_id: str
    strategy: str
    sample_index: int
    program: str


@dataclass(frozen=True)
class VerdictMatrix:
    """Per-test-id pass/fail verdicts, one entry per generated sample."""

    rows: dict[str, tuple[bool, ...]]
    reasons: dict[tuple[str, int], str] = field(default_factory=dict)


@dataclass(frozen=True)
class EvalReport:
    strategy: str
    pass_at: dict[int, float]
    n_test: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "pass_at": {str(k): v for k, v in sorted(self.pass_at.items())},
            "n_test": self.n_test,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalReport":
        return cls(
            strategy=raw["strategy"],
            pass_at={int(k): float(v) for k, v in raw["pass_at"].items()},
            n_test=int(raw["n_test"]),
            config=raw.get("config", {}),
        )


def run_generation(
    testset: Sequence[Example],
    strategy: str,
    selector: Selector,
    pool: Sequence[Example],
    generator: Generator,
    params: GenerationParams,
    samples_path: str | None = None,
    resume: bool = True,
    shot_order: str = "asc",
) -> tuple[list[SampleRecord], dict[str, str]]:
    """Select shots, assemble a prompt, and sample programs for each test item.

    Records are appended to `samples_path` as each test item completes, so an
    interrupted run resumes where it stopped. Gateway failures are recorded
    per test id and the run continues; the failures map is returned.
    """
    by_id = {ex.id: ex for ex in pool}
    completed: dict[str, list[SampleRecord]] = {}
    if samples_path and resume and os.path.exists(samples_path):
        for record in read_samples(samples_path):
            completed.setdefault(record.test_id, []).append(record)
        completed = {
            tid: records
            for tid, records in completed.items()
            if len(records) == params.n_samples
        }
        if completed:
            logger.info("resuming generation: %d test item(s) already in %s", len(completed), samples_path)

    records: list[SampleRecord] = []
    failures: dict[str, str] = {}
    out_fh = open(samples_path, "a", encoding="utf-8") if samples_path else None
    try:
        for test_example in testset:
            if test_example.id in completed:
                records.extend(completed[test_example.id])
                continue
            try:
                shots = selector(test_example)
                prompt = assemble_prompt(shots, by_id, test_example.requirement, shot_order=shot_order)
                programs = generator.generate(prompt.rendered, params)
            except GatewayError as exc:
                logger.warning("generation failed for test %s: %s", test_example.id, exc)
                failures[test_example.id] = str(exc)
                continue
            for i, program in enumerate(programs):
                record = SampleRecord(test_example.id, strategy, i, program)
                records.append(record)
                if out_fh is not None:
                    write_ldjson_line(
                        out_fh,
                        {"test_id": record.test_id, "strategy": record.strategy,
                         "sample_index": record.sample_index, "program": record.program},
                    )
            if out_fh is not None:
                out_fh.flush()
    finally:
        if out_fh is not None:
            out_fh.close()
    return records, failures


def read_samples(path: str) -> list[SampleRecord]:
    out = []
    for lineno, record in read_ldjson(path):
        try:
            out.append(
                SampleRecord(
                    test_id=record["test_id"],
                    strategy=record["strategy"],
                    sample_index=int(record["sample_index"]),
                    program=record["program"],
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad sample record: {exc}") from exc
    return out


def pass_at_k(verdicts: VerdictMatrix, k: int) -> float:
    """Fraction of test ids whose first k samples include at least one pass."""
    if not verdicts.rows:
        raise ValueError("verdict matrix is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    solved = 0
    for test_id, row in verdicts.rows.items():
        if k > len(row):
            raise ValueError(f"k={k} exceeds the {len(row)} sample(s) for test {test_id!r}")
        if any(row[:k]):
            solved += 1
    return solved / len(verdicts.rows)


def load_verdict_file(path: str) -> dict[tuple[str, int], tuple[bool, str]]:
    out: dict[tuple[str, int], tuple[bool, str]] = {}
    for lineno, record in read_ldjson(path):
        try:
            key = (record["test_id"], int(record["sample_index"]))
            out[key] = (bool(record["pass"]), str(record.get("reason", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad verdict record: {exc}") from exc
    return out


def write_verdict_file(path: str, verdicts: Sequence[tuple[str, int, bool, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for test_id, sample_index, passed, reason in verdicts:
            write_ldjson_line(
                fh, {"test_id": test_id, "sample_index": sample_index, "pass": passed, "reason": reason}
            )


def _run_one(program: str, tests: Sequence[str], runner_cmd: Sequence[str], timeout: float) -> tuple[bool, str]:
    source = program + "\n\n" + "\n".join(tests) + "\n"
    with tempfile.NamedTemporaryFile("w", suffix=".py", delete=False, encoding="utf-8") as fh:
        fh.write(source)
        path = fh.name
    try:
        try:
            proc = subprocess.run(
                list(runner_cmd) + [path],
                capture_output=True,
                timeout=timeout,
            )
        except subprocess.TimeoutExpired:
            return False, "timeout"
        except FileNotFoundError as exc:
            raise RuntimeError(f"runner command not found: {runner_cmd[0]!r}") from exc
        if proc.returncode == 0:
            return True, ""
        return False, "nonzero exit"
    finally:
        os.unlink(path)


def obtain_verdicts(
    records: Sequence[SampleRecord],
    provider: str = "external_file",
    verdict_path: str | None = None,
    testset: Sequence[Example] | None = None,
    runner_cmd: Sequence[str] | None = None,
    timeout: float = DEFAULT_RUN_TIMEOUT,
    max_procs: int = 1,
) -> VerdictMatrix:
    """Turn sample records into a verdict matrix.

    external_file loads verdicts as-is and fails on any missing
    (test_id, sample_index). subprocess_runner executes each program with its
    test statements appended; exit code 0 passes, anything else (including a
    wall-clock timeout) fails with the reason recorded.
    """
    if provider not in VERDICT_PROVIDERS:
        raise ValueError(f"unknown verdict provider {provider!r}; expected one of {VERDICT_PROVIDERS}")
    grouped: dict[str, list[SampleRecord]] = {}
    for record in records:
        grouped.setdefault(record.test_id, []).append(record)
    for test_id, group in grouped.items():
        group.sort(key=lambda r: r.sample_index)
        if [r.sample_index for r in group] != list(range(len(group))):
            raise ValueError(f"test {test_id!r}: sample indices are not contiguous from 0")

    rows: dict[str, tuple[bool, ...]] = {}
    reasons: dict[tuple[str, int], str] = {}

    if provider == "external_file":
        if not verdict_path:
            raise ValueError("external_file provider requires verdict_path")
        table = load_verdict_file(verdict_path)
        for test_id, group in grouped.items():
            row = []
            for record in group:
                key = (test_id, record.sample_index)
                if key not in table:
                    raise ValueError(f"{verdict_path}: missing verdict for {key}")
                passed, reason = table[key]
                row.append(passed)
                if reason:
                    reasons[key] = reason
            rows[test_id] = tuple(row)
        return VerdictMatrix(rows=rows, reasons=reasons)

    if testset is None:
        raise ValueError("subprocess_runner requires the testset (for test statements)")
    tests_by_id = {ex.id: ex.tests for ex in testset}
    cmd = list(runner_cmd) if runner_cmd else [sys.executable]
    jobs = []
    for test_id, group in grouped.items():
        tests = tests_by_id.get(test_id)
        if not tests:
            raise ValueError(f"test {test_id!r} has no test statements; use an external verdict file")
        jobs.extend((record, tests) for record in group)
    results = parallel_map(
        lambda job: _run_one(job[0].program, job[1], cmd, timeout), jobs, max_workers=max_procs
    )
    verdict_of = {(job[0].test_id, job[0].sample_index): result for job, result in zip(jobs, results)}
    for test_id, group in grouped.items():
        row = []
        for record in group:
            passed, reason = verdict_of[(test_id, record.sample_index)]
            row.append(passed)
            if reason:
                reasons[(test_id, record.sample_index)] = reason
        rows[test_id] = tuple(row)
    return VerdictMatrix(rows=rows, reasons=reasons)


def evaluate(
    records: Sequence[SampleRecord],
    verdicts: VerdictMatrix,
    ks: Sequence[int],
    strategy: str,
    config: dict | None = None,
) -> EvalReport:
    return EvalReport(
        strategy=strategy,
        pass_at={k: pass_at_k(verdicts, k) for k in ks},
        n_test=len(verdicts.rows),
        config=dict(config or {}),
    )


def average_reports(runs: Sequence[EvalReport]) -> EvalReport:
    """Mean Pass@k over repeated runs of one strategy (sampling re-randomized,
    selection fixed). All runs must share the strategy, test-set size and ks."""
    if not runs:
        raise ValueError("at least one run is required")
    strategies = {run.strategy for run in runs}
    if len(strategies) > 1:
        raise ValueError(f"cannot average across strategies: {sorted(strategies)}")
    if len({run.n_test for run in runs}) > 1 or len({tuple(sorted(run.pass_at)) for run in runs}) > 1:
        raise ValueError("runs cover different test sets or k values")
    ks = sorted(runs[0].pass_at)
    return EvalReport(
        strategy=runs[0].strategy,
        pass_at={k: sum(run.pass_at[k] for run in runs) / len(runs) for k in ks},
        n_test=runs[0].n_test,
        config={"averaged_runs": len(runs), **runs[0].config},
    )


@dataclass(frozen=True)
class ComparisonDocument:
    baseline: str
    rows: list[dict]
    flags: list[str]
    text: str

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "rows": self.rows, "flags": self.flags}


def compare_report(reports: Sequence[EvalReport], baseline: str | None = None) -> ComparisonDocument:
    """Align reports into a strategies-by-k table with relative improvement
    over the named baseline; flags any report whose Pass@k is non-monotone."""
    if not reports:
        raise ValueError("at least one report is required")
    n_tests = {report.n_test for report in reports}
    if len(n_tests) > 1:
        raise ValueError(f"reports cover differently sized test sets: {sorted(n_tests)}")
    ks = sorted({k for report in reports for k in report.pass_at})
    if baseline is None:
        baseline = reports[0].strategy
    base_report = next((rep for rep in reports if rep.strategy == baseline), None)
    if base_report is None:
        raise ValueError(f"baseline strategy {baseline!r} not among the reports")

    flags: list[str] = []
    rows: list[dict] = []
    for report in reports:
        values = [report.pass_at.get(k) for k in ks]
        present = [v for v in values if v is not None]
        if any(b < a - 1e-12 for a, b in zip(present, present[1:])):
            flags.append(f"{report.strategy}: Pass@k decreases with k ({present})")
        improvement = {}
        for k in ks:
            own, base = report.pass_at.get(k), base_report.pass_at.get(k)
            if own is None or base is None or base == 0:
                improvement[k] = None
            else:
                improvement[k] = round((own - base) / base * 100.0, 2)
        rows.append(
            {
                "strategy": report.strategy,
                "pass_at": {str(k): report.pass_at.get(k) for k in ks},
                "improvement_vs_baseline_pct": {str(k): improvement[k] for k in ks},
            }
        )

    width = max(len("strategy"), *(len(row["strategy"]) for row in rows))
    header = "strategy".ljust(width) + "".join(f"  Pass@{k:<6d}" for k in ks) + f"  vs {baseline}"
    lines = [header, "-" * len(header)]
    for row in rows:
        cells = []
        for k in ks:
            value = row["pass_at"][str(k)]
            cells.append(f"  {value:.4f}     " if value is not None else "  --         ")
        deltas = ", ".join(
            f"@{k}:{row['improvement_vs_baseline_pct'][str(k)]:+.2f}%"
            for k in ks
            if row["improvement_vs_baseline_pct"][str(k)] is not None
        )
        lines.append(row["strategy"].ljust(width) + "".join(cells) + "  " + deltas)
    for flag in flags:
        lines.append(f"WARNING: {flag}")
    return ComparisonDocument(baseline=baseline, rows=rows, flags=flags, text="\n".join(lines))
