"""Per-study concept ontology: data model, validation and the dataset file.

A dataset file holds one JSON object per line::

    {"study_id": ..., "patient_id": ..., "image_ref": ...,
     "concepts": [{"concept": ..., "presence": "yes"|"no"|"unknown",
                   "location": str|null, "characteristics": str|null,
                   "evidential_segment": str, "presence_statement": str}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .errors import (
    DuplicateConcept,
    DuplicateName,
    EmptyName,
    EmptyVocabulary,
    InvariantViolation,
    IoFailure,
    MalformedLine,
    UnknownConcept,
    UnknownPresence,
)

DEFAULT_VOCAB_SIZE = 41

_RECORD_FIELDS = ("study_id", "patient_id", "image_ref", "concepts")
_ENTRY_FIELDS = (
    "concept",
    "presence",
    "location",
    "characteristics",
    "evidential_segment",
    "presence_statement",
)


class Presence(Enum):
    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, value: str) -> "Presence":
        try:
            return cls(value)
        except ValueError:
            raise UnknownPresence(f"not a presence status: {value!r}") from None

    @property
    def known(self) -> bool:
        return self is not Presence.UNKNOWN

    def opposite(self) -> "Presence":
        if self is Presence.UNKNOWN:
            raise UnknownPresence("Unknown has no opposite")
        return Presence.NO if self is Presence.YES else Presence.YES


@dataclass(frozen=True)
class ConceptVocabulary:
    names: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self._index[name]


def validate_vocabulary(names: Iterable[str]) -> ConceptVocabulary:
    """Build a vocabulary, rejecting empty lists, blank names and duplicates."""
    names = list(names)
    if not names:
        raise EmptyVocabulary("vocabulary must contain at least one concept")
    seen = set()
    for name in names:
        if not isinstance(name, str) or not name.strip():
            raise EmptyName("concept names must be non-empty strings")
        if name in seen:
            raise DuplicateName(f"duplicate concept name {name!r}")
        seen.add(name)
    return ConceptVocabulary(tuple(names))


def default_vocabulary(size: int = DEFAULT_VOCAB_SIZE) -> ConceptVocabulary:
    return validate_vocabulary(f"finding_{k:02d}" for k in range(1, size + 1))


def load_vocabulary(path) -> ConceptVocabulary:
    """One concept name per line; blank lines and ``#`` comments skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return validate_vocabulary(
        ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")
    )


@dataclass(frozen=True)
class ConceptEntry:
    concept: str
    presence: Presence
    location: Optional[str] = None
    characteristics: Optional[str] = None
    evidential_segment: str = ""
    presence_statement: str = ""

    def __post_init__(self):
        if self.presence is Presence.UNKNOWN:
            if self.location is not None or self.characteristics is not None:
                raise InvariantViolation(
                    f"{self.concept}: attributes must be absent when presence is unknown"
                )
        elif not self.evidential_segment or not self.presence_statement:
            raise InvariantViolation(
                f"{self.concept}: texts must be non-empty when presence is known"
            )

    @property
    def attrs(self) -> tuple[Optional[str], Optional[str]]:
        return (self.location, self.characteristics)

    def to_json(self) -> dict:
        return {
            "concept": self.concept,
            "presence": self.presence.value,
            "location": self.location,
            "characteristics": self.characteristics,
            "evidential_segment": self.evidential_segment,
            "presence_statement": self.presence_statement,
        }


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    patient_id: str
    image_ref: str
    concepts: tuple[ConceptEntry, ...]
    _by_concept: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))
        by_concept = {}
        for entry in self.concepts:
            if entry.concept in by_concept:
                raise DuplicateConcept(entry.concept, self.study_id)
            by_concept[entry.concept] = entry
        object.__setattr__(self, "_by_concept", by_concept)

    def entry(self, concept: str) -> Optional[ConceptEntry]:
        return self._by_concept.get(concept)

    def known_entries(self) -> list[ConceptEntry]:
        return [e for e in self.concepts if e.presence.known]

    def to_json(self) -> dict:
        return {
            "study_id": self.study_id,
            "patient_id": self.patient_id,
            "image_ref": self.image_ref,
            "concepts": [e.to_json() for e in self.concepts],
        }


def check_record(record: StudyRecord, vocab: ConceptVocabulary, line_no=None) -> None:
    for e in record.concepts:
        if e.concept not in vocab:
            raise UnknownConcept(e.concept, line_no)


def dump_record(record: StudyRecord) -> str:
    return json.dumps(record.to_json(), ensure_ascii=False, separators=(",", ":"))


def _opt_str(obj: dict, key: str, line_no: int):
    v = obj[key]
    if v is not None and not isinstance(v, str):
        raise MalformedLine(line_no, f"{key} must be a string or null")
    return v


def _parse_entry(obj, line_no: int) -> ConceptEntry:
    if not isinstance(obj, dict) or set(obj) != set(_ENTRY_FIELDS):
        raise MalformedLine(line_no, "concept entry has wrong fields")
    for key in ("concept", "presence", "evidential_segment", "presence_statement"):
        if not isinstance(obj[key], str):
            raise MalformedLine(line_no, f"{key} must be a string")
    try:
        presence = Presence.parse(obj["presence"])
    except UnknownPresence as exc:
        raise MalformedLine(line_no, str(exc)) from None
    return ConceptEntry(
        concept=obj["concept"],
        presence=presence,
        location=_opt_str(obj, "location", line_no),
        characteristics=_opt_str(obj, "characteristics", line_no),
        evidential_segment=obj["evidential_segment"],
        presence_statement=obj["presence_statement"],
    )


def parse_record(line: str, vocab: ConceptVocabulary, line_no: int = 1) -> StudyRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(line_no, str(exc)) from None
    if not isinstance(obj, dict) or set(obj) != set(_RECORD_FIELDS):
        raise MalformedLine(line_no, "record has wrong fields")
    for key in ("study_id", "patient_id", "image_ref"):
        if not isinstance(obj[key], str):
            raise MalformedLine(line_no, f"{key} must be a string")
    if not isinstance(obj["concepts"], list):
        raise MalformedLine(line_no, "concepts must be an array")
    entries = [_parse_entry(c, line_no) for c in obj["concepts"]]
    record = StudyRecord(obj["study_id"], obj["patient_id"], obj["image_ref"], tuple(entries))
    check_record(record, vocab, line_no)
    return record


def load_dataset(path, vocab: ConceptVocabulary) -> list[StudyRecord]:
    """Read every record of a dataset file, in file order."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            records.append(parse_record(line, vocab, line_no))
    return records


def save_dataset(records: Iterable[StudyRecord], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(dump_record(rec))
                fh.write("\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def holdout_split(records, n_holdout: int) -> tuple[list[StudyRecord], list[StudyRecord]]:
    """``(train, held_out)`` with the last ``n_holdout`` records held out.

    Held-out studies whose patient also appears in the training part are
    rejected, so the split never leaks a patient.
    """
    records = list(records)
    if not 0 <= n_holdout <= len(records):
        raise ValueError(f"cannot hold out {n_holdout} of {len(records)} studies")
    cut = len(records) - n_holdout
    train, test = records[:cut], records[cut:]
    shared = {r.patient_id for r in train} & {r.patient_id for r in test}
    if shared:
        raise InvariantViolation(f"patients on both sides of the split: {sorted(shared)[:3]}")
    return train, test
