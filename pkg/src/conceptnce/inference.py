"""Zero-shot heads: grounding heatmaps and per-concept alignment scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .alignment import AlignConfig, forward_embeddings
from .encoders import DualEncoder, encode_text, patch_descriptors, project_descriptors
from .errors import EmptyText, ImageNotFound
from .numerics import bilinear_resize, first_argmax, floats_to_hex, hex_to_floats, l2_normalize
from .ontology import Presence
from .synthgen import presence_statement, write_pgm


@dataclass(frozen=True)
class GroundingQuery:
    image_ref: str
    prompt: str
    grid: Optional[tuple[int, int]] = None  # (H, W); defaults to the model grid

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise EmptyText("grounding prompt is empty")


@dataclass
class Heatmap:
    grid: np.ndarray  # image resolution
    argmax: tuple[int, int]  # (row, col)
    source_grid: np.ndarray  # (H, W) similarity scores


@dataclass(frozen=True)
class ScoreRow:
    image_ref: str
    concept: str
    score: float


def concept_prompt(concept: str) -> str:
    return presence_statement(concept, Presence.YES)


def _pixels(images: Mapping[str, object], ref: str) -> np.ndarray:
    try:
        img = images[ref]
    except KeyError:
        raise ImageNotFound(ref) from None
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def _text_unit(prompt: str, model: DualEncoder) -> np.ndarray:
    return l2_normalize(encode_text(prompt, model.text))


def _patch_units(pixels: np.ndarray, model: DualEncoder) -> np.ndarray:
    raw = project_descriptors(patch_descriptors(pixels, model.grid), model.image)
    return l2_normalize(raw)


def ground(query: GroundingQuery, model: DualEncoder, cfg: AlignConfig, images: Mapping[str, object]) -> Heatmap:
    """Patch similarity map of ``query.prompt`` resized to the image."""
    pixels = _pixels(images, query.image_ref)
    h, w = query.grid or (model.grid, model.grid)
    t = _text_unit(query.prompt, model)
    v = _patch_units(pixels, model)
    if h * w != v.shape[0]:
        raise ValueError(f"grid {h}x{w} does not hold {v.shape[0]} patches")
    source = ((v @ t) / cfg.tau_attn).reshape(h, w)
    full = bilinear_resize(source, pixels.shape[0], pixels.shape[1])
    return Heatmap(full, first_argmax(full), source)


def classify(
    image_ref: str,
    concepts: Sequence[str],
    model: DualEncoder,
    cfg: AlignConfig,
    images: Mapping[str, object],
) -> list[ScoreRow]:
    """Alignment score of each concept's positive statement against one image."""
    if not concepts:
        return []
    pixels = _pixels(images, image_ref)
    t_raw = np.stack([encode_text(concept_prompt(c), model.text) for c in concepts])
    v_raw = project_descriptors(patch_descriptors(pixels, model.grid), model.image)[None]
    u = forward_embeddings(t_raw, v_raw, cfg.tau_attn).u[:, 0]
    return [ScoreRow(image_ref, c, float(x)) for c, x in zip(concepts, u)]


# ---------------------------------------------------------------- export


def write_heatmap(heatmap: Heatmap, pgm_path, sidecar_path) -> None:
    """Min-max scaled PGM for viewing plus exact hex values per pixel."""
    g = heatmap.grid
    lo, hi = float(g.min()), float(g.max())
    view = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    write_pgm(pgm_path, view)
    codes = floats_to_hex(g)
    width = g.shape[1]
    with open(sidecar_path, "w", encoding="ascii", newline="\n") as fh:
        for k, code in enumerate(codes):
            r, c = divmod(k, width)
            fh.write(f"{r}\t{c}\t{code}\n")


def read_heatmap_sidecar(path) -> Heatmap:
    rows, cols, codes = [], [], []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            r, c, code = line.split()
            rows.append(int(r))
            cols.append(int(c))
            codes.append(code)
    h, w = max(rows) + 1, max(cols) + 1
    grid = np.empty((h, w))
    grid[rows, cols] = hex_to_floats(codes)
    return Heatmap(grid, first_argmax(grid), grid)


def write_score_table(rows: Iterable[ScoreRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["image_ref", "concept", "score"])
        for r in rows:
            out.writerow([r.image_ref, r.concept, repr(r.score)])


def read_score_table(path) -> list[ScoreRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [ScoreRow(r["image_ref"], r["concept"], float(r["score"])) for r in csv.DictReader(fh)]


def heatmap_name(image_ref: str, concept: str) -> str:
    return f"{Path(image_ref).stem}__{concept}"
