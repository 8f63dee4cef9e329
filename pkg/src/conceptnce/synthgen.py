"""Synthetic studies with planted findings.

Every concept owns a fixed signature: four gray levels painted into the four
quadrants of each patch cell it covers.  Boxes snap to the patch grid, so a
patch descriptor inside a box depends only on the concept and the noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigInvalid, ImageNotFound, UnknownPresence
from .ontology import ConceptEntry, ConceptVocabulary, Presence, StudyRecord, default_vocabulary
from .seeding import stream

BACKGROUND = 0.5
SIGNATURE_RADIUS = 0.4
_SIGNATURE_SEED = 0x51C7A7E5

# box shapes in patch units (rows, cols); area above the median is "large"
BOX_SHAPES = ((1, 1), (1, 2), (2, 1), (2, 2))
MEDIAN_BOX_AREA = float(np.median([h * w for h, w in BOX_SHAPES]))


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel bounds."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"inverted box {self}")

    def contains(self, row: int, col: int) -> bool:
        return self.x0 <= col <= self.x1 and self.y0 <= row <= self.y1

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)


@dataclass
class SynthImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) float64 in [0, 1]
    planted: list = field(default_factory=list)  # [(concept, BBox)]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError("pixel grid does not match width/height")
        for _, box in self.planted:
            if box.x0 < 0 or box.y0 < 0 or box.x1 >= self.width or box.y1 >= self.height:
                raise ValueError(f"planted box {box} outside the image")

    def boxes_for(self, concept: str) -> list[BBox]:
        return [b for c, b in self.planted if c == concept]


@dataclass
class GenConfig:
    n_studies: int = 200
    vocab: ConceptVocabulary = field(default_factory=default_vocabulary)
    image_size: int = 56
    grid: int = 7
    noise_sigma: float = 0.05
    p_present: float = 0.1
    p_unknown: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_studies < 0:
            raise ConfigInvalid("n_studies must be >= 0")
        if self.grid < 1 or self.image_size < self.grid or self.image_size % self.grid:
            raise ConfigInvalid(
                f"grid {self.grid} must divide image_size {self.image_size}"
            )
        if self.noise_sigma < 0:
            raise ConfigInvalid("noise_sigma must be >= 0")
        if not (0 <= self.p_present <= 1 and 0 <= self.p_unknown <= 1):
            raise ConfigInvalid("probabilities must lie in [0, 1]")
        if self.p_present + self.p_unknown > 1 + 1e-12:
            raise ConfigInvalid("p_present + p_unknown must not exceed 1")

    @property
    def patch(self) -> int:
        return self.image_size // self.grid


def concept_signatures(n: int) -> np.ndarray:
    """Quadrant gray levels for the first ``n`` concepts, shape (n, 4).

    Signatures sit on a sphere of radius ``SIGNATURE_RADIUS`` around the
    background level, spread by farthest-point selection from a fixed pool,
    so each one is an extreme point of the descriptor cloud.  A concept's
    signature depends only on its vocabulary position.
    """
    rng = np.random.default_rng(_SIGNATURE_SEED)
    pool = rng.normal(size=(max(4096, 8 * n), 4))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    chosen = [0]
    # |cos| treats antipodes as close: a linear encoder maps x and -x onto
    # one line through the bias, which makes them hard to tell apart
    closeness = np.abs(pool @ pool[0])
    while len(chosen) < n:
        k = int(np.argmin(closeness))
        chosen.append(k)
        closeness = np.maximum(closeness, np.abs(pool @ pool[k]))
    return BACKGROUND + SIGNATURE_RADIUS * pool[chosen[:n]]


_YES_TEMPLATES = (
    "Findings show {char}{concept}{loc}, likely new.",
    "{char}{concept} is again noted{loc}, without significant change.",
    "Compared with the prior exam, there is {char}{concept}{loc}.",
    "Lungs are otherwise clear; {char}{concept} persists{loc}.",
    "Evidence of {char}{concept}{loc} is present, as described above.",
)
_NO_TEMPLATES = (
    "No evidence of {concept}{loc}.",
    "Lungs are clear, with no {concept} identified{loc}.",
    "There is no convincing {concept}{loc}, and heart size is normal.",
    "{concept} is not seen{loc} on this study.",
    "Without {concept}{loc}; no acute cardiopulmonary process.",
)


def presence_statement(concept: str, presence: Presence) -> str:
    if presence is Presence.YES:
        return f"There is {concept}."
    if presence is Presence.NO:
        return f"There is no {concept}."
    raise UnknownPresence("no statement for unknown presence")


def render_texts(
    concept: str,
    presence: Presence,
    location: Optional[str] = None,
    characteristics: Optional[str] = None,
    rng=None,
) -> tuple[str, str]:
    """Return ``(evidential_segment, presence_statement)`` for one concept.

    ``rng`` picks the evidential template; an int is used as a seed and
    ``None`` selects the first template.
    """
    statement = presence_statement(concept, presence)
    templates = _YES_TEMPLATES if presence is Presence.YES else _NO_TEMPLATES
    if rng is None:
        k = 0
    else:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        k = int(rng.integers(len(templates)))
    segment = templates[k].format(
        concept=concept,
        char=f"{characteristics} " if characteristics else "",
        loc=f" in the {location} lung" if location else "",
    )
    return segment[0].upper() + segment[1:], statement


def _place_box(rng, occupied: np.ndarray):
    grid = occupied.shape[0]
    shape = BOX_SHAPES[int(rng.integers(len(BOX_SHAPES)))]
    for gh, gw in (shape, (1, 1)):
        free = [
            (r, c)
            for r in range(grid - gh + 1)
            for c in range(grid - gw + 1)
            if not occupied[r : r + gh, c : c + gw].any()
        ]
        if free:
            r, c = free[int(rng.integers(len(free)))]
            return r, c, gh, gw
    # grid is full: overlap rather than drop the finding
    gh, gw = shape
    return int(rng.integers(grid - gh + 1)), int(rng.integers(grid - gw + 1)), gh, gw


def _generate_study(idx: int, cfg: GenConfig, sigs: np.ndarray):
    rng = stream(cfg.seed, "data", idx)
    size, grid, patch = cfg.image_size, cfg.grid, cfg.patch
    n = len(cfg.vocab)

    draws = rng.random(n)
    presence = [
        Presence.YES if d < cfg.p_present
        else Presence.UNKNOWN if d < cfg.p_present + cfg.p_unknown
        else Presence.NO
        for d in draws
    ]

    pixels = np.full((size, size), BACKGROUND)
    occupied = np.zeros((grid, grid), dtype=bool)
    half = patch // 2
    planted = []
    attrs: dict[int, tuple[str, str]] = {}
    for k, p in enumerate(presence):
        if p is not Presence.YES:
            continue
        r, c, gh, gw = _place_box(rng, occupied)
        occupied[r : r + gh, c : c + gw] = True
        y0, x0 = r * patch, c * patch
        y1, x1 = (r + gh) * patch - 1, (c + gw) * patch - 1
        cell = np.empty((patch, patch))
        q = sigs[k]
        cell[:half, :half], cell[:half, half:] = q[0], q[1]
        cell[half:, :half], cell[half:, half:] = q[2], q[3]
        pixels[y0 : y1 + 1, x0 : x1 + 1] = np.tile(cell, (gh, gw))
        box = BBox(x0, y0, x1, y1)
        planted.append((cfg.vocab.names[k], box))
        cx, _ = box.center
        location = "left" if cx < size / 2.0 else "right"
        characteristics = "large" if gh * gw > MEDIAN_BOX_AREA else "small"
        attrs[k] = (location, characteristics)

    entries = []
    for k, (name, p) in enumerate(zip(cfg.vocab.names, presence)):
        if p is Presence.UNKNOWN:
            entries.append(ConceptEntry(name, p))
            continue
        loc, char = attrs.get(k, (None, None))
        seg, stmt = render_texts(name, p, loc, char, rng)
        entries.append(ConceptEntry(name, p, loc, char, seg, stmt))

    if cfg.noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, cfg.noise_sigma, size=pixels.shape)
    pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0

    study_id = f"s{idx:05d}"
    image_ref = f"images/{study_id}.pgm"
    record = StudyRecord(study_id, f"p{idx:05d}", image_ref, tuple(entries))
    return record, SynthImage(size, size, pixels, planted)


def generate(cfg: GenConfig) -> tuple[list[StudyRecord], dict[str, SynthImage]]:
    """Generate ``cfg.n_studies`` studies; a pure function of ``cfg``."""
    cfg.validate()
    sigs = concept_signatures(len(cfg.vocab))
    records, images = [], {}
    for idx in range(cfg.n_studies):
        rec, img = _generate_study(idx, cfg, sigs)
        records.append(rec)
        images[rec.image_ref] = img
    return records, images


# ---------------------------------------------------------------- file IO


def write_pgm(path, pixels) -> None:
    """Binary PGM (P5, maxval 255) of a [0, 1] grid."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ImageNotFound(str(path)) from None
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5" or maxval != 255:
        raise ValueError(f"{path}: only 8-bit P5 images are supported")
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_boxes(path, images: dict[str, SynthImage]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ref in sorted(images):
            for concept, b in images[ref].planted:
                row = {"image_ref": ref, "concept": concept,
                       "x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1}
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_boxes(path) -> dict[str, list[tuple[str, BBox]]]:
    out: dict[str, list[tuple[str, BBox]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            out.setdefault(r["image_ref"], []).append(
                (r["concept"], BBox(r["x0"], r["y0"], r["x1"], r["y1"]))
            )
    return out


def write_synth(out_dir, records, images) -> None:
    """Write ``dataset.jsonl``, ``boxes.jsonl`` and ``images/*.pgm``."""
    from .ontology import save_dataset

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    save_dataset(records, out / "dataset.jsonl")
    for ref, img in images.items():
        write_pgm(out / ref, img.pixels)
    write_boxes(out / "boxes.jsonl", images)


def load_images(root, records, boxes=None) -> dict[str, SynthImage]:
    """Read the images referenced by ``records`` relative to ``root``."""
    root = Path(root)
    boxes = boxes or {}
    images = {}
    for rec in records:
        px = read_pgm(root / rec.image_ref)
        images[rec.image_ref] = SynthImage(px.shape[1], px.shape[0], px, boxes.get(rec.image_ref, []))
    return images
