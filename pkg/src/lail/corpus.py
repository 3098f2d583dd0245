"""Requirement/code datasets: loading, validation, and export.

The training split doubles as the candidate pool from which in-context
examples are drawn; ids must be unique across every split.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

from .util import write_ldjson_line

REQUIRED_KEYS = ("id", "requirement", "code", "tests")


class DatasetError(Exception):
    """Raised for unreadable or schema-violating dataset files."""


@dataclass(frozen=True)
class Example:
    """One requirement/code/tests record; the unit of the candidate pool."""

    id: str
    requirement: str
    code: str
    tests: tuple[str, ...] = ()


@dataclass(frozen=True)
class Dataset:
    name: str
    language_tag: str
    train: tuple[Example, ...]
    dev: tuple[Example, ...] = ()
    test: tuple[Example, ...] = ()

    @property
    def splits(self) -> dict[str, tuple[Example, ...]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}

    def example_by_id(self) -> dict[str, Example]:
        out: dict[str, Example] = {}
        for split in self.splits.values():
            for ex in split:
                out[ex.id] = ex
        return out


@dataclass(frozen=True)
class Finding:
    """One validation problem, naming the offending example where possible."""

    example_id: str
    problem: str


def _parse_example(path: str, lineno: int, line: str) -> Example:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise DatasetError(f"{path}:{lineno}: expected a JSON object")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise DatasetError(f"{path}:{lineno}: missing required field '{key}'")
    extra = set(raw) - set(REQUIRED_KEYS)
    if extra:
        raise DatasetError(f"{path}:{lineno}: unexpected field(s) {sorted(extra)}")
    if not isinstance(raw["id"], str) or not isinstance(raw["requirement"], str) or not isinstance(raw["code"], str):
        raise DatasetError(f"{path}:{lineno}: id, requirement and code must be strings")
    tests = raw["tests"]
    if not isinstance(tests, list) or any(not isinstance(t, str) for t in tests):
        raise DatasetError(f"{path}:{lineno}: tests must be an array of strings")
    return Example(id=raw["id"], requirement=raw["requirement"], code=raw["code"], tests=tuple(tests))


def load_split(path: str) -> tuple[Example, ...]:
    """Load one line-delimited JSON split file."""
    if not os.path.exists(path):
        raise DatasetError(f"split file not found: {path}")
    examples: list[Example] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            examples.append(_parse_example(path, lineno, line))
    return tuple(examples)


def load_dataset(
    root: str,
    split_spec: dict[str, str],
    name: str = "dataset",
    language_tag: str = "python",
) -> Dataset:
    """Load splits named in `split_spec` (split name -> path, relative to `root`).

    Raises DatasetError if any file is missing/malformed or if the loaded
    dataset fails validation (duplicate ids, empty fields).
    """
    known = {"train", "dev", "test"}
    unknown = set(split_spec) - known
    if unknown:
        raise DatasetError(f"unknown split name(s) {sorted(unknown)}; expected {sorted(known)}")
    loaded: dict[str, tuple[Example, ...]] = {}
    for split_name, rel in split_spec.items():
        loaded[split_name] = load_split(os.path.join(root, rel) if root else rel)
    dataset = Dataset(
        name=name,
        language_tag=language_tag,
        train=loaded.get("train", ()),
        dev=loaded.get("dev", ()),
        test=loaded.get("test", ()),
    )
    findings = validate_dataset(dataset)
    if findings:
        lines = "; ".join(f"{f.example_id}: {f.problem}" for f in findings[:10])
        raise DatasetError(f"dataset '{name}' failed validation ({len(findings)} finding(s)): {lines}")
    return dataset


def validate_dataset(dataset: Dataset) -> list[Finding]:
    """Check every Example and Dataset invariant; findings are data, not failures."""
    findings: list[Finding] = []
    seen: dict[str, str] = {}
    for split_name, split in dataset.splits.items():
        for ex in split:
            if not ex.id:
                findings.append(Finding(example_id="<missing>", problem=f"empty id in split '{split_name}'"))
                continue
            if ex.id in seen:
                findings.append(Finding(example_id=ex.id, problem=f"duplicate id (also in split '{seen[ex.id]}')"))
            else:
                seen[ex.id] = split_name
            if not ex.requirement:
                findings.append(Finding(example_id=ex.id, problem="empty requirement"))
            if not ex.code:
                findings.append(Finding(example_id=ex.id, problem="empty code"))
    return findings


def write_split(path: str, examples: Iterable[Example]) -> None:
    """Export examples in the same line-delimited JSON format `load_split` reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            write_ldjson_line(
                fh,
                {"id": ex.id, "requirement": ex.requirement, "code": ex.code, "tests": list(ex.tests)},
            )


def candidate_pool(dataset: Dataset) -> Sequence[Example]:
    """The pool examples are drawn from: always the training split."""
    if not dataset.train:
        raise DatasetError(f"dataset '{dataset.name}' has an empty training split; nothing to select from")
    return dataset.train
