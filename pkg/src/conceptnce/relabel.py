"""Cross-patient relabeling: the (N*B) x B relation matrix.

Text row ``i`` and image column ``j`` are Positive when the text is the
image's own (non-counterfactual) text.  Otherwise the pair is decided by the
presence of the text's concept on both sides:

    No/No   -> Positive            Yes/No, No/Yes -> Negative
    Unknown -> Ignored             Yes/Yes        -> attribute check

and Yes/Yes pairs become Negative only when a contradiction oracle finds
their attributes incompatible; otherwise they are Ignored.
"""

from __future__ import annotations

import json
import select
import subprocess
import threading
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .batching import TextSample
from .errors import (
    MissingConcept,
    OracleFailure,
    OracleTimeout,
    ProcessSpawnFailure,
    ProtocolViolation,
    ShapeMismatch,
)
from .ontology import Presence, StudyRecord

Attrs = tuple[Optional[str], Optional[str]]


class Relation(Enum):
    POSITIVE = "1"
    NEGATIVE = "0"
    IGNORED = "-"


class PairCategory(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORED = "ignored"
    PENDING = "pending"


class Provenance(Enum):
    SAME_PATIENT = "SamePatient"
    NO_NO = "NoNo"
    YES_NO = "YesNo"
    UNKNOWN = "Unknown"
    ATTR_CONTRADICTION = "AttrContradiction"
    ATTR_AMBIGUOUS = "AttrAmbiguous"
    CROSS_PATIENT = "CrossPatient"  # patient-level baseline only


class Verdict(Enum):
    CONTRADICTION = "CONTRADICTION"
    NOT_CONTRADICTION = "NOT_CONTRADICTION"


# integer codes used in the dense grids
_REL_CODE = {Relation.POSITIVE: 1, Relation.NEGATIVE: 0, Relation.IGNORED: -1}
_CODE_REL = {v: k for k, v in _REL_CODE.items()}
_PROVS = list(Provenance)
_PROV_CODE = {p: k for k, p in enumerate(_PROVS)}


@dataclass
class RelationMatrix:
    N: int
    B: int
    codes: np.ndarray  # int8 (N*B, B): 1 positive, 0 negative, -1 ignored
    provenance: np.ndarray  # int8 (N*B, B), index into Provenance

    def __post_init__(self):
        shape = (self.N * self.B, self.B)
        if self.codes.shape != shape or self.provenance.shape != shape:
            raise ShapeMismatch(f"relation grids must be {shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def relation(self, i: int, j: int) -> Relation:
        return _CODE_REL[int(self.codes[i, j])]

    def provenance_at(self, i: int, j: int) -> Provenance:
        return _PROVS[int(self.provenance[i, j])]

    def counts(self) -> Counter:
        """Cell counts keyed by ``(Relation, Provenance)``."""
        pairs = self.codes.astype(np.int16) * 64 + self.provenance
        out = Counter()
        for key, n in zip(*np.unique(pairs, return_counts=True)):
            code, prov = divmod(int(key), 64)
            out[(_CODE_REL[code], _PROVS[prov])] = int(n)
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RelationMatrix)
            and (self.N, self.B) == (other.N, other.B)
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.provenance, other.provenance)
        )


def breakdown(p_text: Presence, p_image: Presence) -> PairCategory:
    if p_text is Presence.UNKNOWN or p_image is Presence.UNKNOWN:
        return PairCategory.IGNORED
    if p_text is Presence.NO and p_image is Presence.NO:
        return PairCategory.POSITIVE
    if p_text is Presence.YES and p_image is Presence.YES:
        return PairCategory.PENDING
    return PairCategory.NEGATIVE


# ---------------------------------------------------------------- oracles

ContradictionOracle = Callable[[Attrs, Attrs], Verdict]

ATTR_FIELDS = ("location", "characteristics")


def parse_antonym_table(text: str) -> dict[str, frozenset]:
    """Parse ``field:token_a<>token_b`` lines into per-field pair sets."""
    table: dict[str, set] = {f: set() for f in ATTR_FIELDS}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            fld, pair = line.split(":", 1)
            a, b = pair.split("<>")
        except ValueError:
            raise ValueError(f"antonym table line {n}: expected field:a<>b, got {raw!r}") from None
        fld, a, b = fld.strip(), a.strip().lower(), b.strip().lower()
        if fld not in table or not a or not b:
            raise ValueError(f"antonym table line {n}: bad entry {raw!r}")
        table[fld].add((a, b))
        table[fld].add((b, a))
    return {f: frozenset(p) for f, p in table.items()}


def default_antonym_table() -> dict[str, frozenset]:
    text = resources.files("conceptnce").joinpath("data/antonyms.txt").read_text(encoding="utf-8")
    return parse_antonym_table(text)


def _tokens(value: Optional[str]) -> set[str]:
    if not value:
        return set()
    return {t.strip(".,;:") for t in value.lower().replace("-", " ").split()} - {""}


class RuleOracle:
    """Antonym-table judge: contradiction iff some antonym pair appears
    across the same attribute field of the two sides."""

    def __init__(self, table: Optional[dict[str, frozenset]] = None):
        self.table = default_antonym_table() if table is None else table

    @classmethod
    def from_file(cls, path) -> "RuleOracle":
        return cls(parse_antonym_table(Path(path).read_text(encoding="utf-8")))

    def __call__(self, attrs_a: Attrs, attrs_b: Attrs) -> Verdict:
        for fld, va, vb in zip(ATTR_FIELDS, attrs_a, attrs_b):
            pairs = self.table.get(fld, ())
            ta, tb = _tokens(va), _tokens(vb)
            if any((x, y) in pairs for x in ta for y in tb):
                return Verdict.CONTRADICTION
        return Verdict.NOT_CONTRADICTION


def rule_oracle(attrs_a: Attrs, attrs_b: Attrs) -> Verdict:
    return _DEFAULT_RULE_ORACLE(attrs_a, attrs_b)


class ConstantOracle:
    def __init__(self, verdict: Verdict):
        self.verdict = verdict

    def __call__(self, attrs_a: Attrs, attrs_b: Attrs) -> Verdict:
        return self.verdict


def render_attrs(attrs: Attrs) -> str:
    loc, char = attrs
    return f"location={loc if loc is not None else 'null'};characteristics={char if char is not None else 'null'}"


class ExternalOracle:
    """Forwards queries to a child process over a one-line-per-query protocol.

    Request: two JSON string literals separated by a TAB.  Reply: exactly
    ``CONTRADICTION`` or ``NOT_CONTRADICTION``.  Queries are serialized and
    replies cached by request line.
    """

    def __init__(self, command: Sequence[str], timeout: float = 10.0):
        self.command = list(command)
        self.timeout = timeout
        self._cache: dict[str, Verdict] = {}
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise ProcessSpawnFailure(f"cannot start {self.command!r}: {exc}") from exc

    def _readline(self) -> str:
        ready, _, _ = select.select([self._proc.stdout], [], [], self.timeout)
        if not ready:
            raise OracleTimeout(f"no reply within {self.timeout}s")
        line = self._proc.stdout.readline()
        if not line:
            raise OracleFailure("oracle process closed its output")
        return line.rstrip("\r\n")

    def __call__(self, attrs_a: Attrs, attrs_b: Attrs) -> Verdict:
        request = json.dumps(render_attrs(attrs_a)) + "\t" + json.dumps(render_attrs(attrs_b))
        with self._lock:
            if request in self._cache:
                return self._cache[request]
            try:
                self._proc.stdin.write(request + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise OracleFailure(f"oracle process unavailable: {exc}") from exc
            reply = self._readline()
            try:
                verdict = Verdict(reply)
            except ValueError:
                raise ProtocolViolation(reply) from None
            self._cache[request] = verdict
            return verdict

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def external_oracle_adapter(endpoint, timeout: float = 10.0) -> ExternalOracle:
    command = endpoint.split() if isinstance(endpoint, str) else list(endpoint)
    return ExternalOracle(command, timeout)


_DEFAULT_RULE_ORACLE = RuleOracle()


# ---------------------------------------------------------------- matrix


def _canonical(a: Attrs, b: Attrs) -> tuple[Attrs, Attrs]:
    def key(x: Attrs):
        return tuple("" if v is None else "\x01" + v for v in x)

    return (a, b) if key(a) <= key(b) else (b, a)


def mine_hard_negative(
    attrs_text: Attrs, attrs_image: Attrs, oracle: ContradictionOracle = rule_oracle
) -> tuple[Relation, Provenance]:
    """Resolve a Yes/Yes pair.  Oracle errors propagate."""
    if all(v is None for v in (*attrs_text, *attrs_image)):
        return Relation.IGNORED, Provenance.ATTR_AMBIGUOUS
    a, b = _canonical(tuple(attrs_text), tuple(attrs_image))
    if oracle(a, b) is Verdict.CONTRADICTION:
        return Relation.NEGATIVE, Provenance.ATTR_CONTRADICTION
    return Relation.IGNORED, Provenance.ATTR_AMBIGUOUS


def _check_shape(samples, studies) -> int:
    b = len(studies)
    if b == 0 or len(samples) == 0 or len(samples) % b:
        raise ShapeMismatch(f"{len(samples)} texts cannot form N*B rows for B={b}")
    for s in samples:
        if not 0 <= s.target_image_index < b:
            raise ShapeMismatch(f"target_image_index {s.target_image_index} outside batch")
    return len(samples) // b


def build_relation_matrix(
    samples: Sequence[TextSample],
    studies: Sequence[StudyRecord],
    oracle: ContradictionOracle = rule_oracle,
    *,
    fail_open: bool = True,
    mining: bool = True,
) -> RelationMatrix:
    """Label every (text, image) pair of a batch.

    ``fail_open`` turns oracle failures into Ignored cells instead of raising.
    ``mining=False`` skips the attribute check and ignores every Yes/Yes pair.
    """
    n = _check_shape(samples, studies)
    rows, b = len(samples), len(studies)
    codes = np.empty((rows, b), dtype=np.int8)
    prov = np.empty((rows, b), dtype=np.int8)
    for i, s in enumerate(samples):
        for j, study in enumerate(studies):
            if not s.is_counterfactual and s.source_patient == study.patient_id:
                rel, pv = Relation.POSITIVE, Provenance.SAME_PATIENT
            else:
                entry = study.entry(s.concept)
                if entry is None:
                    raise MissingConcept(s.concept, study.study_id)
                cat = breakdown(s.source_presence, entry.presence)
                if cat is PairCategory.POSITIVE:
                    rel, pv = Relation.POSITIVE, Provenance.NO_NO
                elif cat is PairCategory.NEGATIVE:
                    rel, pv = Relation.NEGATIVE, Provenance.YES_NO
                elif cat is PairCategory.IGNORED:
                    rel, pv = Relation.IGNORED, Provenance.UNKNOWN
                elif not mining:
                    rel, pv = Relation.IGNORED, Provenance.ATTR_AMBIGUOUS
                else:
                    try:
                        rel, pv = mine_hard_negative(s.attrs, entry.attrs, oracle)
                    except OracleFailure:
                        if not fail_open:
                            raise
                        rel, pv = Relation.IGNORED, Provenance.ATTR_AMBIGUOUS
            codes[i, j] = _REL_CODE[rel]
            prov[i, j] = _PROV_CODE[pv]
    return RelationMatrix(n, b, codes, prov)


def patient_relation_matrix(
    samples: Sequence[TextSample], studies: Sequence[StudyRecord]
) -> RelationMatrix:
    """CLIP-style baseline: own texts positive, every other pair negative."""
    n = _check_shape(samples, studies)
    rows, b = len(samples), len(studies)
    codes = np.zeros((rows, b), dtype=np.int8)
    prov = np.full((rows, b), _PROV_CODE[Provenance.CROSS_PATIENT], dtype=np.int8)
    for i, s in enumerate(samples):
        for j, study in enumerate(studies):
            if not s.is_counterfactual and s.source_patient == study.patient_id:
                codes[i, j] = 1
                prov[i, j] = _PROV_CODE[Provenance.SAME_PATIENT]
    return RelationMatrix(n, b, codes, prov)


# ---------------------------------------------------------------- export


def write_relation_matrix(m: RelationMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"N\t{m.N}\tB\t{m.B}\n")
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                fh.write(f"{i}\t{j}\t{m.relation(i, j).value}\t{m.provenance_at(i, j).value}\n")


def read_relation_matrix(path) -> RelationMatrix:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if len(head) != 4 or head[0] != "N" or head[2] != "B":
            raise ValueError(f"{path}: missing N/B header")
        n, b = int(head[1]), int(head[3])
        codes = np.full((n * b, b), 2, dtype=np.int8)
        prov = np.zeros((n * b, b), dtype=np.int8)
        for line in fh:
            i, j, rel, pv = line.rstrip("\n").split("\t")
            i, j = int(i), int(j)
            codes[i, j] = _REL_CODE[Relation(rel)]
            prov[i, j] = _PROV_CODE[Provenance(pv)]
    if np.any(codes == 2):
        raise ValueError(f"{path}: matrix has undefined cells")
    return RelationMatrix(n, b, codes, prov)


def format_summary(m: RelationMatrix) -> str:
    lines = [f"rows={m.shape[0]} cols={m.shape[1]} cells={m.codes.size}"]
    for (rel, pv), count in sorted(m.counts().items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)):
        lines.append(f"{rel.name.lower()}\t{pv.value}\t{count}")
    return "\n".join(lines)
