"""Parsing of KT1-style interaction logs and the question bank.

Input files are UTF-8 comma-separated text with a header row.  Column
resolution is header-driven so both the compact layout
(timestamp, question_id, bundle_id, user_answer, elapsed_time) and the
common public KT1-style layouts load without configuration.
"""

from __future__ import annotations

import csv
import io
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DataError

VALID_ANSWERS = frozenset("abcd")

# Accepted header spellings, first match wins.
_COLUMN_ALIASES = {
    "timestamp_ms": ("timestamp_ms", "timestamp"),
    "question_id": ("question_id", "item_id"),
    "bundle_id": ("bundle_id",),
    "user_answer": ("user_answer", "answer"),
    "elapsed_time_ms": ("elapsed_time_ms", "elapsed_time"),
    "learner_id": ("learner_id", "user_id", "student_id"),
}

_LEARNER_FILE_RE = re.compile(r"^u(?P<id>\w+)$")


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    """One learner-question event as logged by the tutoring system."""

    learner_id: str
    timestamp_ms: int
    question_id: str
    bundle_id: str | None
    user_answer: str  # one of a-d, or "" when the learner did not answer
    elapsed_time_ms: int


@dataclass(frozen=True, slots=True)
class LabeledInteraction:
    """InteractionRecord joined with the question bank: correctness + KC tags."""

    learner_id: str
    timestamp_ms: int
    question_id: str
    bundle_id: str | None
    user_answer: str
    elapsed_time_ms: int
    correct: bool
    kc_tags: frozenset[int]


@dataclass(frozen=True, slots=True)
class RowError:
    """A malformed input row, reported instead of silently dropped."""

    source: str
    line_no: int
    reason: str


@dataclass
class ParseResult:
    records: list[InteractionRecord] = field(default_factory=list)
    errors: list[RowError] = field(default_factory=list)


@dataclass
class LabelResult:
    labeled: list[LabeledInteraction] = field(default_factory=list)
    errors: list[RowError] = field(default_factory=list)


class QuestionBank:
    """Map question_id -> (correct_answer, kc_tags)."""

    def __init__(self, entries: Mapping[str, tuple[str, frozenset[int]]]):
        self._entries = dict(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, question_id: str) -> bool:
        return question_id in self._entries

    def correct_answer(self, question_id: str) -> str:
        return self._entries[question_id][0]

    def kc_tags(self, question_id: str) -> frozenset[int]:
        return self._entries[question_id][1]

    def items(self):
        return self._entries.items()


def _resolve_columns(header: list[str], source: str) -> dict[str, int]:
    lowered = [h.strip().lower() for h in header]
    mapping: dict[str, int] = {}
    for canonical, aliases in _COLUMN_ALIASES.items():
        for alias in aliases:
            if alias in lowered:
                mapping[canonical] = lowered.index(alias)
                break
    required = ("timestamp_ms", "question_id", "user_answer", "elapsed_time_ms")
    for name in required:
        if name not in mapping:
            raise DataError(f"{source}: missing required column '{name}'")
    return mapping


def _learner_id_from_path(path: Path) -> str | None:
    m = _LEARNER_FILE_RE.match(path.stem)
    return m.group("id") if m else None


def _open_source(source) -> tuple[io.TextIOBase, str, bool]:
    """Return (text stream, source name, needs_close)."""
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        return open(path, "r", encoding="utf-8", newline=""), str(path), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8")), "<bytes>", False
    if isinstance(source, io.BytesIO):
        return io.TextIOWrapper(source, encoding="utf-8"), "<stream>", False
    return source, getattr(source, "name", "<stream>"), False


def parse_kt1(source, learner_id: str | None = None) -> ParseResult:
    """Parse one KT1 interaction file into records, in file order.

    learner_id precedence: explicit argument, then a learner_id column,
    then a "u<id>" file name.  Rows with unparsable or negative numeric
    fields become per-row errors; a missing required column is fatal.
    """
    stream, name, needs_close = _open_source(source)
    try:
        reader = csv.reader(stream)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{name}: empty file, no header row")
        cols = _resolve_columns(header, name)

        file_learner = learner_id
        if file_learner is None and "learner_id" not in cols:
            if isinstance(source, (str, os.PathLike)):
                file_learner = _learner_id_from_path(Path(source))
            if file_learner is None:
                raise DataError(
                    f"{name}: no learner_id column and no learner id "
                    "recoverable from the file name"
                )

        result = ParseResult()
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                record = _parse_row(row, cols, file_learner, name, line_no)
            except _RowProblem as exc:
                result.errors.append(RowError(name, line_no, str(exc)))
                continue
            result.records.append(record)
        return result
    finally:
        if needs_close:
            stream.close()


class _RowProblem(Exception):
    pass


def _parse_row(row, cols, file_learner, name, line_no) -> InteractionRecord:
    def cell(key, default=""):
        idx = cols.get(key)
        if idx is None or idx >= len(row):
            return default
        return row[idx].strip()

    lid = file_learner if file_learner is not None else cell("learner_id")
    if not lid:
        raise _RowProblem("empty learner_id")

    try:
        timestamp_ms = int(cell("timestamp_ms"))
    except ValueError:
        raise _RowProblem(f"unparsable timestamp {cell('timestamp_ms')!r}")
    if timestamp_ms < 0:
        raise _RowProblem(f"negative timestamp {timestamp_ms}")

    question_id = cell("question_id")
    if not question_id:
        raise _RowProblem("empty question_id")

    answer = cell("user_answer").lower()
    if answer and answer not in VALID_ANSWERS:
        raise _RowProblem(f"invalid user_answer {answer!r}")

    try:
        elapsed = int(cell("elapsed_time_ms") or "0")
    except ValueError:
        raise _RowProblem(f"unparsable elapsed_time {cell('elapsed_time_ms')!r}")
    if elapsed < 0:
        raise _RowProblem(f"negative elapsed_time {elapsed}")

    bundle = cell("bundle_id") or None
    return InteractionRecord(lid, timestamp_ms, question_id, bundle, answer, elapsed)


def parse_kt1_dir(data_dir) -> ParseResult:
    """Parse every u*.csv learner file in a directory, merged by learner id."""
    data_dir = Path(data_dir)
    paths = sorted(p for p in data_dir.glob("u*.csv"))
    if not paths:
        raise DataError(f"{data_dir}: no u*.csv learner files found")
    merged = ParseResult()
    for path in paths:
        part = parse_kt1(path)
        merged.records.extend(part.records)
        merged.errors.extend(part.errors)
    merged.records.sort(key=lambda r: r.learner_id)  # stable: file order kept
    return merged


def parse_tags(raw: str) -> frozenset[int]:
    """";"-separated KC ids; "-1" or empty means untagged."""
    raw = raw.strip()
    if not raw or raw == "-1":
        return frozenset()
    return frozenset(int(t) for t in raw.split(";") if t.strip())


def load_question_bank(source) -> QuestionBank:
    """Load the question bank (question_id, correct_answer, tags columns)."""
    stream, name, needs_close = _open_source(source)
    try:
        reader = csv.reader(stream)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{name}: empty question bank")
        try:
            qi = header.index("question_id")
            ai = header.index("correct_answer")
            ti = header.index("tags")
        except ValueError as exc:
            raise DataError(f"{name}: question bank missing column: {exc}")

        entries: dict[str, tuple[str, frozenset[int]]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            qid = row[qi].strip()
            answer = row[ai].strip().lower()
            if answer not in VALID_ANSWERS:
                raise DataError(f"{name}:{line_no}: invalid correct_answer {answer!r}")
            tags = parse_tags(row[ti] if ti < len(row) else "")
            if qid in entries:
                prev_answer, prev_tags = entries[qid]
                if prev_answer != answer:
                    raise DataError(
                        f"{name}:{line_no}: duplicate question {qid} with "
                        f"conflicting answers {prev_answer!r} vs {answer!r}"
                    )
                tags = prev_tags | tags
            entries[qid] = (answer, tags)
        return QuestionBank(entries)
    finally:
        if needs_close:
            stream.close()


def label_correctness(records: Iterable[InteractionRecord], bank: QuestionBank) -> LabelResult:
    """Join records with the bank: set the correct flag and copy KC tags.

    A blank user_answer counts as incorrect (a correctness flag must be
    total).  Records for unknown questions become per-record errors.
    """
    result = LabelResult()
    for i, rec in enumerate(records):
        if rec.question_id not in bank:
            result.errors.append(
                RowError("<records>", i, f"unknown question_id {rec.question_id!r}")
            )
            continue
        correct = rec.user_answer == bank.correct_answer(rec.question_id)
        result.labeled.append(
            LabeledInteraction(
                learner_id=rec.learner_id,
                timestamp_ms=rec.timestamp_ms,
                question_id=rec.question_id,
                bundle_id=rec.bundle_id,
                user_answer=rec.user_answer,
                elapsed_time_ms=rec.elapsed_time_ms,
                correct=correct,
                kc_tags=bank.kc_tags(rec.question_id),
            )
        )
    return result


# ---------------------------------------------------------------------------
# Labeled interaction store (delimited text, round-trip exact)
# ---------------------------------------------------------------------------

_STORE_HEADER = [
    "learner_id",
    "timestamp_ms",
    "question_id",
    "bundle_id",
    "user_answer",
    "elapsed_time_ms",
    "correct",
    "kc_tags",
]


def write_labeled_store(path, labeled: Iterable[LabeledInteraction]) -> int:
    """Write labeled interactions as CSV; returns the row count."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_STORE_HEADER)
        for it in labeled:
            writer.writerow(
                [
                    it.learner_id,
                    it.timestamp_ms,
                    it.question_id,
                    it.bundle_id or "",
                    it.user_answer,
                    it.elapsed_time_ms,
                    int(it.correct),
                    ";".join(str(t) for t in sorted(it.kc_tags)),
                ]
            )
            n += 1
    return n


def read_labeled_store(path) -> list[LabeledInteraction]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _STORE_HEADER:
            raise DataError(f"{path}: not a labeled interaction store")
        out = []
        for row in reader:
            if not row:
                continue
            out.append(
                LabeledInteraction(
                    learner_id=row[0],
                    timestamp_ms=int(row[1]),
                    question_id=row[2],
                    bundle_id=row[3] or None,
                    user_answer=row[4],
                    elapsed_time_ms=int(row[5]),
                    correct=bool(int(row[6])),
                    kc_tags=parse_tags(row[7]),
                )
            )
        return out


def group_by_learner(labeled: Iterable[LabeledInteraction]) -> dict[str, list[LabeledInteraction]]:
    """Group interactions per learner, preserving input order within each."""
    out: dict[str, list[LabeledInteraction]] = {}
    for it in labeled:
        out.setdefault(it.learner_id, []).append(it)
    return out
