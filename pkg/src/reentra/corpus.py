"""Labeled contract manifests, stratified k-fold splits and corpus statistics."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .errors import IngestionError, ManifestParseError, ValidationError

UNCATEGORIZED = "uncategorized"


@dataclass(frozen=True)
class ContractRecord:
    id: str
    path: str
    source: bytes = field(repr=False)
    label: int
    category: str | None = None


class Labeled(Protocol):
    id: str
    label: int


@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: dict[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return [rid for rid, f in self.assignments.items() if f == fold]

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for rid, f in self.assignments.items():
            out[f].append(rid)
        return out


@dataclass(frozen=True)
class CorpusStats:
    total: int
    per_label: dict[int, int]
    per_category: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_label": {str(k): v for k, v in sorted(self.per_label.items())},
            "per_category": dict(sorted(self.per_category.items())),
        }


def _check_label(value, line_no: int) -> int:
    # bool is an int subclass in Python; JSON true/false are not labels
    if isinstance(value, bool) or not isinstance(value, int) or value not in (0, 1):
        raise ManifestParseError(line_no, "label must be 0 or 1")
    return value


def parse_manifest_line(line: str, line_no: int) -> dict:
    try:
        entry = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(line_no, f"invalid JSON ({exc.msg})") from None
    if not isinstance(entry, dict):
        raise ManifestParseError(line_no, "entry must be a JSON object")
    if not isinstance(entry.get("path"), str) or not entry["path"]:
        raise ManifestParseError(line_no, "missing string key 'path'")
    if "label" not in entry:
        raise ManifestParseError(line_no, "missing key 'label'")
    _check_label(entry["label"], line_no)
    for key in ("id", "category"):
        if key in entry and entry[key] is not None and not isinstance(entry[key], str):
            raise ManifestParseError(line_no, f"'{key}' must be a string")
    return entry


def load_manifest(
    manifest_path: str | Path,
    on_error: Callable[[IngestionError], None] | None = None,
) -> list[ContractRecord]:
    """Read a JSON-lines manifest and the contract sources it points to.

    Relative contract paths resolve against the manifest's directory. Blank
    lines are ignored; every other line must be a JSON object with ``path``
    and ``label`` keys. An unreadable contract raises ``IngestionError``
    unless ``on_error`` is given, in which case the error is handed to it
    and the record skipped.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records: list[ContractRecord] = []
    seen: set[str] = set()
    with open(manifest_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entry = parse_manifest_line(line, line_no)
            rid = entry.get("id") or entry["path"]
            if rid in seen:
                raise ValidationError(f"manifest line {line_no}: duplicate id {rid!r}")
            seen.add(rid)
            path = Path(entry["path"])
            if not path.is_absolute():
                path = base / path
            try:
                source = path.read_bytes()
            except OSError as exc:
                err = IngestionError(path, exc.strerror or "unreadable")
                if on_error is None:
                    raise err from None
                on_error(err)
                continue
            records.append(
                ContractRecord(
                    id=rid,
                    path=str(path),
                    source=source,
                    label=entry["label"],
                    category=entry.get("category"),
                )
            )
    return records


def stratified_kfold(records: Sequence[Labeled], k: int, seed: int) -> FoldSplit:
    """Assign each record to one of ``k`` folds, balancing both labels.

    Each label group is shuffled with a generator seeded by ``seed`` and
    dealt round-robin; the second group continues from the fold where the
    first stopped so fold sizes stay within one of each other as well.
    """
    n = len(records)
    if k < 2 or k > n:
        raise ValueError(f"k must satisfy 2 <= k <= {n}, got {k}")
    ids = [r.id for r in records]
    if len(set(ids)) != n:
        raise ValidationError("record ids must be unique")

    rng = np.random.default_rng(seed)
    groups: dict[int, list[str]] = defaultdict(list)
    for r in records:
        groups[r.label].append(r.id)

    assignments: dict[str, int] = {}
    offset = 0
    for label in sorted(groups):
        members = groups[label]
        order = rng.permutation(len(members))
        for pos, idx in enumerate(order):
            assignments[members[idx]] = (offset + pos) % k
        offset = (offset + len(members)) % k
    # report in input order
    return FoldSplit(k=k, assignments={rid: assignments[rid] for rid in ids})


def corpus_stats(records: Iterable[ContractRecord]) -> CorpusStats:
    per_label: Counter = Counter()
    per_category: Counter = Counter()
    for r in records:
        per_label[r.label] += 1
        per_category[r.category or UNCATEGORIZED] += 1
    return CorpusStats(
        total=sum(per_label.values()),
        per_label=dict(per_label),
        per_category=dict(per_category),
    )
