"""Pointing game and rank-based AUROC."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .alignment import AlignConfig
from .encoders import DualEncoder
from .errors import DegenerateLabels, NoBoxes
from .inference import GroundingQuery, Heatmap, classify, concept_prompt, ground
from .ontology import Presence, StudyRecord
from .synthgen import BBox


def pointing_game(heatmap, boxes: Sequence[BBox]) -> bool:
    """Hit iff the heatmap maximum lies in any box (bounds inclusive).

    ``heatmap`` may be a :class:`Heatmap` or a bare ``(row, col)`` pair.
    """
    if not boxes:
        raise NoBoxes("pointing game needs at least one box")
    row, col = heatmap.argmax if isinstance(heatmap, Heatmap) else heatmap
    return any(b.contains(row, col) for b in boxes)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u_stat = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


@dataclass
class EvalOutcome:
    hits: int = 0
    total: int = 0
    hit_flags: list = field(default_factory=list)  # [(image_ref, concept, hit)]
    per_concept_auroc: dict = field(default_factory=dict)

    @property
    def pointing_game(self) -> float:
        return self.hits / self.total if self.total else float("nan")

    @property
    def macro_auroc(self) -> float:
        vals = list(self.per_concept_auroc.values())
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_grounding(
    records: Sequence[StudyRecord],
    boxes: Mapping[str, Sequence[tuple[str, BBox]]],
    model: DualEncoder,
    cfg: AlignConfig,
    images: Mapping[str, object],
    outcome: EvalOutcome | None = None,
) -> EvalOutcome:
    """Pointing game over every (image, present concept) query."""
    outcome = outcome or EvalOutcome()
    for rec in records:
        planted = boxes.get(rec.image_ref, [])
        for entry in rec.concepts:
            if entry.presence is not Presence.YES:
                continue
            gt = [b for c, b in planted if c == entry.concept]
            hm = ground(GroundingQuery(rec.image_ref, concept_prompt(entry.concept)), model, cfg, images)
            hit = pointing_game(hm, gt)
            outcome.hits += int(hit)
            outcome.total += 1
            outcome.hit_flags.append((rec.image_ref, entry.concept, hit))
    if outcome.total == 0:
        raise NoBoxes("no present concept to ground")
    return outcome


def evaluate_classification(
    records: Sequence[StudyRecord],
    concepts: Sequence[str],
    model: DualEncoder,
    cfg: AlignConfig,
    images: Mapping[str, object],
    outcome: EvalOutcome | None = None,
) -> EvalOutcome:
    """Per-concept AUROC over Yes (1) vs No (0) studies; concepts lacking
    either class are skipped.  The macro average is their plain mean."""
    outcome = outcome or EvalOutcome()
    scores: dict[str, list[float]] = {c: [] for c in concepts}
    labels: dict[str, list[int]] = {c: [] for c in concepts}
    for rec in records:
        for row in classify(rec.image_ref, list(concepts), model, cfg, images):
            entry = rec.entry(row.concept)
            if entry is None or not entry.presence.known:
                continue
            scores[row.concept].append(row.score)
            labels[row.concept].append(int(entry.presence is Presence.YES))
    for c in concepts:
        if 0 < sum(labels[c]) < len(labels[c]):
            outcome.per_concept_auroc[c] = auroc(scores[c], labels[c])
    return outcome


def format_report(outcome: EvalOutcome) -> str:
    lines = ["concept\tauroc\tpg_hits\tpg_total"]
    per_pg: dict[str, list[int]] = {}
    for _, concept, hit in outcome.hit_flags:
        per_pg.setdefault(concept, []).append(int(hit))
    names = sorted(set(outcome.per_concept_auroc) | set(per_pg))
    for c in names:
        a = outcome.per_concept_auroc.get(c)
        hits = per_pg.get(c, [])
        lines.append(f"{c}\t{'' if a is None else f'{a:.6f}'}\t{sum(hits)}\t{len(hits)}")
    lines.append(
        f"summary\tpointing_game={outcome.pointing_game:.6f}\thits={outcome.hits}\t"
        f"total={outcome.total}\tmacro_auroc={outcome.macro_auroc:.6f}\t"
        f"concepts={len(outcome.per_concept_auroc)}"
    )
    return "\n".join(lines)
