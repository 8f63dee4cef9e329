"""Toy dual encoders.

The image side maps a fixed 6-statistic descriptor of every patch through a
learned affine projection.  The text side averages hashed word embeddings.
Neither output is normalized here.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyText, ShapeMismatch
from .numerics import floats_to_hex, hex_to_floats
from .seeding import stream

DESCRIPTOR_DIM = 6
# pixel level subtracted before taking statistics (mid-gray background)
DESCRIPTOR_CENTER = 0.5
DEFAULT_DIM = 32
DEFAULT_GRID = 7
DEFAULT_HASH_BUCKETS = 2048
INIT_SCALE = 0.05

CHECKPOINT_FORMAT = "conceptnce-checkpoint/1"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass
class ImageEncoderParams:
    projection: np.ndarray  # (DESCRIPTOR_DIM, D)
    bias: np.ndarray  # (D,)


@dataclass
class TextEncoderParams:
    embedding_table: np.ndarray  # (hash_buckets, D)

    @property
    def hash_buckets(self) -> int:
        return self.embedding_table.shape[0]


@dataclass
class DualEncoder:
    image: ImageEncoderParams
    text: TextEncoderParams
    grid: int = DEFAULT_GRID
    config: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.image.projection.shape[1]

    @property
    def hash_buckets(self) -> int:
        return self.text.hash_buckets

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "projection": self.image.projection,
            "bias": self.image.bias,
            "embedding_table": self.text.embedding_table,
        }

    def copy(self) -> "DualEncoder":
        return DualEncoder(
            ImageEncoderParams(self.image.projection.copy(), self.image.bias.copy()),
            TextEncoderParams(self.text.embedding_table.copy()),
            self.grid,
            dict(self.config),
        )


def init_encoder(
    seed: int,
    dim: int = DEFAULT_DIM,
    grid: int = DEFAULT_GRID,
    hash_buckets: int = DEFAULT_HASH_BUCKETS,
    config: dict | None = None,
) -> DualEncoder:
    """Uniform(-0.05, 0.05) initialization from the ``init`` sub-stream."""
    rng = stream(seed, "init")
    proj = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(DESCRIPTOR_DIM, dim))
    bias = rng.uniform(-INIT_SCALE, INIT_SCALE, size=dim)
    table = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(hash_buckets, dim))
    return DualEncoder(ImageEncoderParams(proj, bias), TextEncoderParams(table), grid, dict(config or {}))


# ---------------------------------------------------------------- image side


def patch_descriptors(pixels, grid: int) -> np.ndarray:
    """(grid*grid, 6) statistics per patch in row-major patch order.

    Columns: patch mean, top-left / top-right / bottom-left / bottom-right
    quadrant means, population variance.  Means are taken of
    ``pixel - DESCRIPTOR_CENTER``.
    """
    px = np.asarray(getattr(pixels, "pixels", pixels), dtype=np.float64) - DESCRIPTOR_CENTER
    h, w = px.shape
    if grid < 1 or h % grid or w % grid:
        raise ShapeMismatch(f"grid {grid} does not divide image {h}x{w}")
    ph, pw = h // grid, w // grid
    if ph < 2 or pw < 2:
        raise ShapeMismatch("patches must be at least 2x2 pixels")
    blocks = px.reshape(grid, ph, grid, pw).transpose(0, 2, 1, 3).reshape(grid * grid, ph, pw)
    hh, hw = ph // 2, pw // 2
    return np.stack(
        [
            blocks.mean(axis=(1, 2)),
            blocks[:, :hh, :hw].mean(axis=(1, 2)),
            blocks[:, :hh, hw:].mean(axis=(1, 2)),
            blocks[:, hh:, :hw].mean(axis=(1, 2)),
            blocks[:, hh:, hw:].mean(axis=(1, 2)),
            blocks.var(axis=(1, 2)),
        ],
        axis=1,
    )


def project_descriptors(desc: np.ndarray, params: ImageEncoderParams) -> np.ndarray:
    return desc @ params.projection + params.bias


def encode_image(img, params: ImageEncoderParams, grid: int = DEFAULT_GRID) -> np.ndarray:
    """Raw (L, D) patch embeddings of one image."""
    return project_descriptors(patch_descriptors(img, grid), params)


# ---------------------------------------------------------------- text side


def fnv1a64(word: str) -> int:
    h = _FNV_OFFSET
    for byte in word.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    words = (w.strip(string.punctuation) for w in text.lower().split())
    return [w for w in words if w]


def word_buckets(text: str, hash_buckets: int) -> list[int]:
    words = tokenize(text)
    if not words:
        raise EmptyText(f"no words in {text!r}")
    return [fnv1a64(w) % hash_buckets for w in words]


def bag_matrix(texts, hash_buckets: int) -> np.ndarray:
    """(len(texts), hash_buckets) averaging weights so that T = A @ table."""
    a = np.zeros((len(texts), hash_buckets))
    for i, text in enumerate(texts):
        ids = word_buckets(text, hash_buckets)
        np.add.at(a[i], ids, 1.0 / len(ids))
    return a


def encode_text(text: str, params: TextEncoderParams) -> np.ndarray:
    """Mean of the hashed word rows of ``text``."""
    ids = word_buckets(text, params.hash_buckets)
    return params.embedding_table[ids].mean(axis=0)


# ---------------------------------------------------------------- checkpoint


def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "hex": floats_to_hex(a)}


def _unpack(obj: dict) -> np.ndarray:
    return hex_to_floats(obj["hex"], tuple(obj["shape"]))


def save_checkpoint(model: DualEncoder, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "dim": model.dim,
        "grid": model.grid,
        "hash_buckets": model.hash_buckets,
        "config": model.config,
        "projection": _pack(model.image.projection),
        "bias": _pack(model.image.bias),
        "embedding_table": _pack(model.text.embedding_table),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> DualEncoder:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    model = DualEncoder(
        ImageEncoderParams(_unpack(doc["projection"]), _unpack(doc["bias"])),
        TextEncoderParams(_unpack(doc["embedding_table"])),
        int(doc["grid"]),
        doc.get("config", {}),
    )
    if model.dim != doc["dim"] or model.hash_buckets != doc["hash_buckets"]:
        raise ShapeMismatch(f"{path}: header disagrees with parameter shapes")
    return model
