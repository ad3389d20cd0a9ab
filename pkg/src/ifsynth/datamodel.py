"""Shared record types, text normalization, dedup, and line-oriented serde.

Every pipeline stage exchanges data through the immutable record types below
and persists them as line-delimited JSON with fixed field layouts.  The
serializer is deliberately deterministic (fixed key order, compact
separators, no timestamps) so that identical runs produce byte-identical
artifact files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Any, Iterable, Optional

INSTRUCTION_SOURCES = ("seed", "augmented")
STAGE_TAGS = ("raw", "cross_verified", "backtranslation_verified")
OUTCOME_STATUSES = ("ok", "compile_error", "runtime_error", "timeout", "bad_return")
PAIR_LEVELS = ("instruction", "query", "online")


class RecordParseError(ValueError):
    """A record line failed to parse; ``field`` names the offending field."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def normalize_text(s: str) -> str:
    """Return the dedup key for ``s``: trimmed, whitespace-collapsed, case-folded.

    Display text is kept verbatim elsewhere; this form exists only for keying
    (duplicate detection, n-gram tokenization).
    """
    return " ".join(s.split()).casefold()


def make_id(kind: str, *parts: str) -> str:
    """Stable content-hash identifier: 16 hex chars of sha256 over kind+parts."""
    h = hashlib.sha256("\x1f".join((kind,) + parts).encode("utf-8"))
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class Instruction:
    id: str
    text: str
    source: str
    parent_id: Optional[str]
    stage_tag: str

    def __post_init__(self):
        if not normalize_text(self.text):
            raise ValueError("instruction text is empty after normalization")
        if self.source not in INSTRUCTION_SOURCES:
            raise ValueError(f"bad instruction source {self.source!r}")
        if self.source == "augmented" and not self.parent_id:
            raise ValueError("augmented instruction requires parent_id")
        if self.stage_tag not in STAGE_TAGS:
            raise ValueError(f"bad stage_tag {self.stage_tag!r}")


def make_instruction(
    text: str,
    source: str = "seed",
    parent_id: Optional[str] = None,
    stage_tag: str = "raw",
) -> Instruction:
    ident = make_id("instruction", source, normalize_text(text))
    return Instruction(ident, text, source, parent_id, stage_tag)


def advance_stage(inst: Instruction, new_tag: str) -> Instruction:
    """Move an instruction forward along the stage ladder; never backwards."""
    if new_tag not in STAGE_TAGS:
        raise ValueError(f"bad stage_tag {new_tag!r}")
    if STAGE_TAGS.index(new_tag) < STAGE_TAGS.index(inst.stage_tag):
        raise ValueError(
            f"stage_tag may not regress: {inst.stage_tag!r} -> {new_tag!r}"
        )
    return Instruction(inst.id, inst.text, inst.source, inst.parent_id, new_tag)


@dataclass(frozen=True)
class VerifierFunction:
    id: str
    instruction_id: str
    source_code: str
    compile_ok: bool
    accuracy: Optional[float]

    def __post_init__(self):
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"verifier accuracy out of range: {self.accuracy}")


def make_verifier(instruction_id: str, source_code: str, compile_ok: bool = False) -> VerifierFunction:
    ident = make_id("verifier", instruction_id, source_code)
    return VerifierFunction(ident, instruction_id, source_code, compile_ok, None)


@dataclass(frozen=True)
class TestCase:
    id: str
    instruction_id: str
    input: str
    expected: bool
    accuracy: Optional[float]

    def __post_init__(self):
        if not isinstance(self.expected, bool):
            raise ValueError("test case expected output must be a boolean")
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"case accuracy out of range: {self.accuracy}")


def make_case(instruction_id: str, input: str, expected: bool) -> TestCase:
    ident = make_id("case", instruction_id, input, str(expected))
    return TestCase(ident, instruction_id, input, expected, None)


@dataclass(frozen=True)
class EvalOutcome:
    status: str
    value: Optional[bool]
    duration_ms: float = 0.0

    def __post_init__(self):
        if self.status not in OUTCOME_STATUSES:
            raise ValueError(f"bad outcome status {self.status!r}")
        # Evaluation outcomes carry a verdict on success; compile outcomes are
        # verdict-free, so "ok without value" is legal here and the stronger
        # guarantee lives on the evaluate() operation.
        if self.value is not None and self.status != "ok":
            raise ValueError("outcome value requires status ok")


@dataclass(frozen=True)
class QueryInput:
    id: str
    instruction_id: str
    query_text: str
    rendered: str

    def __post_init__(self):
        if self.query_text not in self.rendered:
            raise ValueError("rendered input must contain the query text verbatim")


def make_query_input(instruction_id: str, query_text: str, rendered: str) -> QueryInput:
    ident = make_id("input", instruction_id, query_text)
    return QueryInput(ident, instruction_id, query_text, rendered)


@dataclass(frozen=True)
class TrainSample:
    instruction_id: str
    input_id: str
    input_text: str
    response_text: str
    pass_rate: float
    judge_score: int

    def __post_init__(self):
        if not self.pass_rate > 0.5:
            raise ValueError(f"train sample pass_rate must exceed 0.5, got {self.pass_rate}")
        if not 8 <= self.judge_score <= 10:
            raise ValueError(f"train sample judge_score must be >= 8, got {self.judge_score}")


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    level: str
    chosen_pass_rate: float
    rejected_pass_rate: float
    round: Optional[int] = None

    def __post_init__(self):
        if self.level not in PAIR_LEVELS:
            raise ValueError(f"bad pair level {self.level!r}")
        if self.chosen == self.rejected:
            raise ValueError("preference pair must have chosen != rejected")
        if not self.chosen_pass_rate > self.rejected_pass_rate:
            raise ValueError("chosen_pass_rate must exceed rejected_pass_rate")
        if self.level in ("instruction", "query"):
            if self.rejected_pass_rate != 0:
                raise ValueError("offline pairs require rejected_pass_rate = 0")
            if not self.chosen_pass_rate > 0.5:
                raise ValueError("offline pairs require chosen_pass_rate > 0.5")
            if self.round is not None:
                raise ValueError("round is only valid for online pairs")
        elif self.round is None:
            raise ValueError("online pairs require a round index")


@dataclass(frozen=True)
class SftRecord:
    input: str
    output: str


def dedup_instructions(items: Iterable[Instruction]) -> list[Instruction]:
    """Drop duplicate instructions by normalized key.

    The first occurrence of each key claims its position in the output; if a
    seed later collides with a retained augmented instruction, the seed
    replaces it in that position (seeds always beat augmentations).
    """
    slot_by_key: dict[str, int] = {}
    out: list[Instruction] = []
    for inst in items:
        key = normalize_text(inst.text)
        pos = slot_by_key.get(key)
        if pos is None:
            slot_by_key[key] = len(out)
            out.append(inst)
        elif out[pos].source != "seed" and inst.source == "seed":
            out[pos] = inst
    return out


# --- line-oriented serialization -------------------------------------------
#
# One self-describing JSON object per line.  The record kind is inferred from
# the exact field-name set, which is unique per schema.

def _opt(check):
    return lambda v: v is None or check(v)


_IS_STR = lambda v: isinstance(v, str)
_IS_BOOL = lambda v: isinstance(v, bool)
_IS_INT = lambda v: isinstance(v, int) and not isinstance(v, bool)
_IS_NUM = lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)

_SCHEMAS: dict[str, tuple[type, tuple[tuple[str, Any], ...]]] = {
    "instruction": (
        Instruction,
        (
            ("id", _IS_STR),
            ("text", _IS_STR),
            ("source", lambda v: v in INSTRUCTION_SOURCES),
            ("parent_id", _opt(_IS_STR)),
            ("stage_tag", lambda v: v in STAGE_TAGS),
        ),
    ),
    "verifier": (
        VerifierFunction,
        (
            ("id", _IS_STR),
            ("instruction_id", _IS_STR),
            ("source_code", _IS_STR),
            ("compile_ok", _IS_BOOL),
            ("accuracy", _opt(_IS_NUM)),
        ),
    ),
    "case": (
        TestCase,
        (
            ("id", _IS_STR),
            ("instruction_id", _IS_STR),
            ("input", _IS_STR),
            ("expected", _IS_BOOL),
            ("accuracy", _opt(_IS_NUM)),
        ),
    ),
    "query_input": (
        QueryInput,
        (
            ("id", _IS_STR),
            ("instruction_id", _IS_STR),
            ("query_text", _IS_STR),
            ("rendered", _IS_STR),
        ),
    ),
    "train_sample": (
        TrainSample,
        (
            ("instruction_id", _IS_STR),
            ("input_id", _IS_STR),
            ("input_text", _IS_STR),
            ("response_text", _IS_STR),
            ("pass_rate", _IS_NUM),
            ("judge_score", _IS_INT),
        ),
    ),
    "sft": (
        SftRecord,
        (
            ("input", _IS_STR),
            ("output", _IS_STR),
        ),
    ),
    "preference": (
        PreferencePair,
        (
            ("prompt", _IS_STR),
            ("chosen", _IS_STR),
            ("rejected", _IS_STR),
            ("level", lambda v: v in PAIR_LEVELS),
            ("chosen_pass_rate", _IS_NUM),
            ("rejected_pass_rate", _IS_NUM),
            ("round", _opt(_IS_INT)),
        ),
    ),
    "outcome": (
        EvalOutcome,
        (
            ("status", lambda v: v in OUTCOME_STATUSES),
            ("value", _opt(_IS_BOOL)),
            ("duration_ms", _IS_NUM),
        ),
    ),
}

_CLASS_TO_KIND = {cls: kind for kind, (cls, _) in _SCHEMAS.items()}
_FIELDSET_TO_KIND = {
    frozenset(name for name, _ in spec): kind for kind, (_, spec) in _SCHEMAS.items()
}


def record_kind(record: Any) -> str:
    kind = _CLASS_TO_KIND.get(type(record))
    if kind is None:
        raise TypeError(f"not a serializable record type: {type(record).__name__}")
    return kind


def serialize_record(record: Any) -> str:
    """Render a record as one deterministic JSON line (no trailing newline)."""
    kind = record_kind(record)
    _, spec = _SCHEMAS[kind]
    payload = {name: getattr(record, name) for name, _ in spec}
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def parse_record(line: str) -> Any:
    """Parse one serialized line back into its record type.

    The record kind is inferred from the field-name set; mismatches raise
    RecordParseError naming the first offending field.
    """
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordParseError(f"record line is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise RecordParseError("record line is not an object")

    present = frozenset(payload)
    kind = _FIELDSET_TO_KIND.get(present)
    if kind is None:
        kind = _closest_kind(present)
        cls, spec = _SCHEMAS[kind]
        for name, _ in spec:
            if name not in present:
                raise RecordParseError(
                    f"{kind} record missing field '{name}'", field=name
                )
        for name in sorted(present):
            if name not in {n for n, _ in spec}:
                raise RecordParseError(
                    f"{kind} record has unexpected field '{name}'", field=name
                )
        raise RecordParseError(f"unrecognized record shape: {sorted(present)}")

    cls, spec = _SCHEMAS[kind]
    for name, check in spec:
        if not check(payload[name]):
            raise RecordParseError(
                f"{kind} record field '{name}' has invalid value {payload[name]!r}",
                field=name,
            )
    kwargs = {name: payload[name] for name, _ in spec}
    # json gives ints where the schema means fractions; normalize to float
    for name in ("accuracy", "pass_rate", "chosen_pass_rate", "rejected_pass_rate", "duration_ms"):
        if name in kwargs and kwargs[name] is not None:
            kwargs[name] = float(kwargs[name])
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise RecordParseError(f"{kind} record violates invariants: {exc}") from exc


def _closest_kind(present: frozenset[str]) -> str:
    best_kind, best_score = None, (-1, 0)
    for kind, (_, spec) in _SCHEMAS.items():
        names = {n for n, _ in spec}
        overlap = len(names & present)
        score = (overlap, -len(names ^ present))
        if score > best_score:
            best_kind, best_score = kind, score
    assert best_kind is not None
    return best_kind


# --- file helpers -----------------------------------------------------------

def atomic_write_text(path: str, text: str) -> None:
    """Write a file via a same-directory temp file + rename.

    A crash mid-write can leave a stray temp file but never a half-written
    file at the final path.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def write_records(path: str, records: Iterable[Any]) -> int:
    """Atomically write records as JSONL; returns the record count."""
    lines = [serialize_record(r) for r in records]
    text = "\n".join(lines) + ("\n" if lines else "")
    atomic_write_text(path, text)
    return len(lines)


def read_records(path: str) -> list[Any]:
    with open(path, encoding="utf-8") as fh:
        return [parse_record(line) for line in fh if line.strip()]
