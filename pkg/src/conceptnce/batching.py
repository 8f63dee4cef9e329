"""Batch assembly: N texts per image, with optional counterfactual slots."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import ConfigInvalid, InvariantViolation, NoKnownConcept
from .ontology import Presence, StudyRecord
from .seeding import stream

DEFAULT_B = 192
DEFAULT_N = 8
DEFAULT_P_COUNTERFACTUAL = 0.25


@dataclass(frozen=True)
class TextSample:
    text: str
    concept: str
    source_patient: str
    source_presence: Presence
    attrs: tuple[Optional[str], Optional[str]]
    is_counterfactual: bool
    target_image_index: int

    def __post_init__(self):
        if self.is_counterfactual and self.attrs != (None, None):
            raise InvariantViolation("counterfactual samples carry no attributes")


@dataclass
class BatchPlan:
    studies: Sequence[StudyRecord]
    N: int = DEFAULT_N
    p_counterfactual: float = DEFAULT_P_COUNTERFACTUAL
    seed: int = 0
    B: Optional[int] = None

    def __post_init__(self):
        self.studies = list(self.studies)
        if self.B is None:
            self.B = len(self.studies)
        if self.B != len(self.studies):
            raise ConfigInvalid(f"B={self.B} but {len(self.studies)} studies were given")
        if self.B < 1 or self.N < 1:
            raise ConfigInvalid("B and N must be positive")
        if not 0.0 <= self.p_counterfactual <= 1.0:
            raise ConfigInvalid("p_counterfactual must lie in [0, 1]")
        patients = [s.patient_id for s in self.studies]
        if len(set(patients)) != len(patients):
            raise InvariantViolation("a batch must not repeat a patient")


def sample_texts(plan: BatchPlan) -> list[TextSample]:
    """Draw ``N`` texts for each of the ``B`` images; row ``i = j*N + k``.

    Each slot picks one of the image's known-presence concepts uniformly.
    With probability ``p_counterfactual`` the slot instead takes that
    concept's text from another batch patient with the opposite presence
    (attributes dropped); with no such donor it stays a normal sample.
    The text variant is evidential segment or presence statement, 50/50.
    """
    rng = stream(plan.seed, "sampling")
    studies = plan.studies
    known = []
    for s in studies:
        entries = s.known_entries()
        if not entries:
            raise NoKnownConcept(s.study_id)
        known.append(entries)

    samples = []
    for j, study in enumerate(studies):
        for _ in range(plan.N):
            entry = known[j][int(rng.integers(len(known[j])))]
            counterfactual = rng.random() < plan.p_counterfactual
            use_segment = rng.random() < 0.5
            donor = None
            if counterfactual:
                want = entry.presence.opposite()
                donors = []
                for jj, other in enumerate(studies):
                    if jj == j:
                        continue
                    e = other.entry(entry.concept)
                    if e is not None and e.presence is want:
                        donors.append((other, e))
                if donors:
                    donor = donors[int(rng.integers(len(donors)))]
            if donor is not None:
                other, e = donor
                samples.append(
                    TextSample(
                        text=e.evidential_segment if use_segment else e.presence_statement,
                        concept=e.concept,
                        source_patient=other.patient_id,
                        source_presence=e.presence,
                        attrs=(None, None),
                        is_counterfactual=True,
                        target_image_index=j,
                    )
                )
            else:
                samples.append(
                    TextSample(
                        text=entry.evidential_segment if use_segment else entry.presence_statement,
                        concept=entry.concept,
                        source_patient=study.patient_id,
                        source_presence=entry.presence,
                        attrs=entry.attrs,
                        is_counterfactual=False,
                        target_image_index=j,
                    )
                )
    return samples


def dump_samples(samples: Sequence[TextSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row, s in enumerate(samples):
            rec = {
                "row": row,
                "text": s.text,
                "concept": s.concept,
                "source_patient": s.source_patient,
                "presence": s.source_presence.value,
                "is_counterfactual": s.is_counterfactual,
                "target_image_index": s.target_image_index,
            }
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")
