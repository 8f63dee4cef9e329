"""Concept-aggregated alignment scores, the Concept-Aware NCE loss and training.

Forward pass for text row ``i`` and image ``j``::

    s[i,j,l] = <t_i, v_jl> / tau_attn          (unit-normalized t and v)
    w[i,j,:] = softmax(s[i,j,:])
    z[i,j]   = sum_l w[i,j,l] v_jl
    u[i,j]   = <t_i, z[i,j] / |z[i,j]|>

The loss is a masked multi-positive InfoNCE over ``u / tau_loss`` in both
directions, each averaged over the rows (columns) holding a positive.
Gradients are derived by hand; ``backward_to_params`` chains them through
both normalizations, the softmax and the two encoders.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .batching import BatchPlan, TextSample, sample_texts
from .encoders import DualEncoder, bag_matrix, patch_descriptors
from .errors import AllRowsEmpty, ConfigInvalid, DegenerateAggregate, NotNormalized, ShapeMismatch
from .numerics import EPS_NORM, l2_norm, l2_normalize, softmax
from .ontology import StudyRecord
from .relabel import RelationMatrix, build_relation_matrix, patient_relation_matrix, rule_oracle
from .seeding import stream

log = logging.getLogger(__name__)

UNIT_TOL = 1e-9


@dataclass
class AlignConfig:
    tau_attn: float = 0.1
    tau_loss: float = 0.07
    epsilon: float = 1e-8
    learning_rate: float = 0.05

    def validate(self) -> None:
        for name in ("tau_attn", "tau_loss", "epsilon", "learning_rate"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be strictly positive")


# ---------------------------------------------------------------- single cell


def _check_unit(x: np.ndarray, what: str) -> None:
    if np.any(np.abs(l2_norm(x) - 1.0) > UNIT_TOL):
        raise NotNormalized(f"{what} must be unit-norm")


def similarity_map(t_norm, v_norm, tau_attn: float) -> np.ndarray:
    """Patch scores ``(t . v_l) / tau_attn`` for one text and one image."""
    t = np.asarray(t_norm, dtype=np.float64)
    v = np.asarray(v_norm, dtype=np.float64)
    _check_unit(t, "text embedding")
    _check_unit(v, "patch embeddings")
    return (v @ t) / tau_attn


def aggregate(s, v_norm) -> tuple[np.ndarray, np.ndarray]:
    """Attention weights over patches and the unit-norm pooled vector."""
    v = np.asarray(v_norm, dtype=np.float64)
    w = softmax(s)
    z = w @ v
    nz = float(np.sqrt(z @ z))
    if nz < EPS_NORM:
        raise DegenerateAggregate("pooled patch vector cancels to zero")
    return w, z / nz


# ---------------------------------------------------------------- masks / loss


@dataclass
class MaskPair:
    m_pos: np.ndarray  # float64 0/1
    m_valid: np.ndarray

    def __post_init__(self):
        self.m_pos = np.asarray(self.m_pos, dtype=np.float64)
        self.m_valid = np.asarray(self.m_valid, dtype=np.float64)
        if self.m_pos.shape != self.m_valid.shape:
            raise ShapeMismatch("positive and valid masks differ in shape")
        if np.any((self.m_pos > 0) & (self.m_valid == 0)):
            raise ValueError("a positive cell must also be valid")


def masks_from_relations(m: RelationMatrix) -> MaskPair:
    return MaskPair(m.codes == 1, m.codes != -1)


def _masked_lse(x: np.ndarray, mask: np.ndarray, axis: int) -> np.ndarray:
    """log(sum(mask * exp(x))) along ``axis``; -inf where the mask is empty."""
    xm = np.where(mask > 0, x, -np.inf)
    mx = xm.max(axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(xm - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def _direction_terms(x, m_pos, m_valid, eps, axis):
    """Per-row (axis=1) or per-column (axis=0) loss and log-denominator."""
    lse_pos = _masked_lse(x, m_pos, axis)
    lse_valid = _masked_lse(x, m_valid, axis)
    log_den = np.logaddexp(lse_valid, np.log(eps)) if eps > 0 else lse_valid
    has_pos = m_pos.sum(axis=axis) > 0
    loss = np.where(has_pos, log_den - np.where(has_pos, lse_pos, 0.0), 0.0)
    return loss, lse_pos, log_den, has_pos


def _check_inputs(u, masks):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape != masks.m_pos.shape:
        raise ShapeMismatch(f"scores {u.shape} vs masks {masks.m_pos.shape}")
    if not masks.m_pos.any():
        raise AllRowsEmpty("no positive pair in the batch")
    return u


def ca_nce_loss(u, masks: MaskPair, cfg: AlignConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Total loss plus the per-row text-to-image and per-column
    image-to-text terms (rows/columns without a positive report 0)."""
    u = _check_inputs(u, masks)
    x = u / cfg.tau_loss
    row, _, _, row_has = _direction_terms(x, masks.m_pos, masks.m_valid, cfg.epsilon, 1)
    col, _, _, col_has = _direction_terms(x, masks.m_pos, masks.m_valid, cfg.epsilon, 0)
    total = row[row_has].mean() + col[col_has].mean()
    return float(total), row, col


def ca_nce_grad_u(u, masks: MaskPair, cfg: AlignConfig) -> np.ndarray:
    """Exact gradient of the total loss with respect to every score."""
    u = _check_inputs(u, masks)
    x = u / cfg.tau_loss
    mp, mv = masks.m_pos, masks.m_valid
    grad = np.zeros_like(u)
    for axis in (1, 0):
        _, lse_pos, log_den, has = _direction_terms(x, mp, mv, cfg.epsilon, axis)
        keep = (mv > 0) & np.expand_dims(has, axis)
        pos = keep & (mp > 0)
        # D - S_pos summed directly (negatives plus epsilon) so that positive
        # cells never subtract two nearly equal softmax shares
        lse_rest = _masked_lse(x, (mv > 0) & ~(mp > 0), axis)
        if cfg.epsilon > 0:
            lse_rest = np.logaddexp(lse_rest, np.log(cfg.epsilon))
        lse_pos, log_den, lse_rest = (
            np.expand_dims(np.where(has, a, 0.0), axis) for a in (lse_pos, log_den, lse_rest)
        )
        d_neg = np.exp(np.where(keep & ~pos, x - log_den, -np.inf))
        d_pos = np.exp(np.where(pos, x - lse_pos + lse_rest - log_den, -np.inf))
        grad += (d_neg - d_pos) / has.sum()
    return grad / cfg.tau_loss


# ---------------------------------------------------------------- batch forward


@dataclass
class AlignmentBatch:
    """Everything one step needs: patch descriptors, text bags, bookkeeping."""

    descriptors: np.ndarray  # (B, L, 6)
    bags: np.ndarray  # (N*B, hash_buckets)
    samples: Sequence[TextSample] = ()
    studies: Sequence[StudyRecord] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.bags.shape[0], self.descriptors.shape[0]


def make_batch(samples, studies, descriptors: Mapping[str, np.ndarray], hash_buckets: int) -> AlignmentBatch:
    desc = np.stack([descriptors[s.image_ref] for s in studies])
    bags = bag_matrix([s.text for s in samples], hash_buckets)
    return AlignmentBatch(desc, bags, list(samples), list(studies))


@dataclass
class SimilarityTensor:
    t_raw: np.ndarray  # (R, D)
    t_len: np.ndarray  # (R, 1)
    t_bar: np.ndarray  # (R, D)
    v_raw: np.ndarray  # (B, L, D)
    v_len: np.ndarray  # (B, L, 1)
    v_bar: np.ndarray  # (B, L, D)
    s: np.ndarray  # (R, B, L)
    w: np.ndarray  # (R, B, L)
    z_len: np.ndarray  # (R, B, 1)
    v_hat: np.ndarray  # (R, B, D)
    u: np.ndarray  # (R, B)


def forward_embeddings(t_raw, v_raw, tau_attn: float) -> SimilarityTensor:
    t_raw = np.asarray(t_raw, dtype=np.float64)
    v_raw = np.asarray(v_raw, dtype=np.float64)
    t_len = l2_norm(t_raw)
    v_len = l2_norm(v_raw)
    if np.any(t_len < EPS_NORM) or np.any(v_len < EPS_NORM):
        raise DegenerateAggregate("zero-length embedding")
    t_bar = t_raw / t_len
    v_bar = v_raw / v_len
    s = np.einsum("id,jld->ijl", t_bar, v_bar) / tau_attn
    w = softmax(s, axis=-1)
    z = np.einsum("ijl,jld->ijd", w, v_bar)
    z_len = l2_norm(z)
    if np.any(z_len < EPS_NORM):
        raise DegenerateAggregate("pooled patch vector cancels to zero")
    v_hat = z / z_len
    u = np.einsum("id,ijd->ij", t_bar, v_hat)
    return SimilarityTensor(t_raw, t_len, t_bar, v_raw, v_len, v_bar, s, w, z_len, v_hat, u)


def forward(batch: AlignmentBatch, model: DualEncoder, cfg: AlignConfig) -> SimilarityTensor:
    t_raw = batch.bags @ model.text.embedding_table
    v_raw = batch.descriptors @ model.image.projection + model.image.bias
    return forward_embeddings(t_raw, v_raw, cfg.tau_attn)


def _unit_backward(g: np.ndarray, unit: np.ndarray, length: np.ndarray) -> np.ndarray:
    # d(x/|x|)^T g = (I - xhat xhat^T) g / |x|
    return (g - np.sum(g * unit, axis=-1, keepdims=True) * unit) / length


def backward_embeddings(sim: SimilarityTensor, grad_u, tau_attn: float):
    """Gradients of the loss with respect to the raw text and patch embeddings."""
    g = np.asarray(grad_u, dtype=np.float64)
    if g.shape != sim.u.shape:
        raise ShapeMismatch(f"grad_u {g.shape} vs scores {sim.u.shape}")
    g_vhat = g[..., None] * sim.t_bar[:, None, :]
    g_tbar = np.einsum("ij,ijd->id", g, sim.v_hat)
    g_z = _unit_backward(g_vhat, sim.v_hat, sim.z_len)
    g_w = np.einsum("ijd,jld->ijl", g_z, sim.v_bar)
    g_vbar = np.einsum("ijl,ijd->jld", sim.w, g_z)
    g_s = sim.w * (g_w - np.sum(sim.w * g_w, axis=-1, keepdims=True))
    g_tbar += np.einsum("ijl,jld->id", g_s, sim.v_bar) / tau_attn
    g_vbar += np.einsum("ijl,id->jld", g_s, sim.t_bar) / tau_attn
    g_t = _unit_backward(g_tbar, sim.t_bar, sim.t_len)
    g_v = _unit_backward(g_vbar, sim.v_bar, sim.v_len)
    return g_t, g_v


def backward_to_params(
    batch: AlignmentBatch, sim: SimilarityTensor, grad_u, model: DualEncoder, cfg: AlignConfig
) -> dict[str, np.ndarray]:
    g_t, g_v = backward_embeddings(sim, grad_u, cfg.tau_attn)
    return {
        "projection": np.einsum("jlk,jld->kd", batch.descriptors, g_v),
        "bias": g_v.sum(axis=(0, 1)),
        "embedding_table": batch.bags.T @ g_t,
    }


def batch_loss(batch: AlignmentBatch, relations: RelationMatrix, model: DualEncoder, cfg: AlignConfig) -> float:
    sim = forward(batch, model, cfg)
    return ca_nce_loss(sim.u, masks_from_relations(relations), cfg)[0]


def loss_and_grads(
    batch: AlignmentBatch, relations: RelationMatrix, model: DualEncoder, cfg: AlignConfig
) -> tuple[float, dict[str, np.ndarray]]:
    if relations.shape != batch.shape:
        raise ShapeMismatch(f"relations {relations.shape} vs batch {batch.shape}")
    masks = masks_from_relations(relations)
    sim = forward(batch, model, cfg)
    loss, _, _ = ca_nce_loss(sim.u, masks, cfg)
    return loss, backward_to_params(batch, sim, ca_nce_grad_u(sim.u, masks, cfg), model, cfg)


def train_step(
    batch: AlignmentBatch, relations: RelationMatrix, model: DualEncoder, cfg: AlignConfig
) -> tuple[DualEncoder, float]:
    """One plain gradient-descent step; returns the new model and the pre-step loss."""
    loss, grads = loss_and_grads(batch, relations, model, cfg)
    new = model.copy()
    for name, arr in new.arrays().items():
        arr -= cfg.learning_rate * grads[name]
    return new, loss


@dataclass
class AdamState:
    """First and second moment estimates keyed like ``DualEncoder.arrays()``."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    batch: AlignmentBatch,
    relations: RelationMatrix,
    model: DualEncoder,
    cfg: AlignConfig,
    state: AdamState,
) -> tuple[DualEncoder, float]:
    """One bias-corrected Adam step at ``cfg.learning_rate``; ``state`` is updated in place."""
    loss, grads = loss_and_grads(batch, relations, model, cfg)
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    new = model.copy()
    for name, arr in new.arrays().items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        arr -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new, loss


# ---------------------------------------------------------------- training loop


OPTIMIZERS = ("gd", "adam")


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 192
    texts_per_image: int = 8
    p_counterfactual: float = 0.25
    seed: int = 0
    relations: str = "concept"  # "concept" or "patient" (CLIP-style baseline)
    mining: bool = True
    fail_open: bool = True  # oracle failures become Ignored cells
    optimizer: str = "gd"  # "gd" or "adam"
    align: AlignConfig = field(default_factory=AlignConfig)

    def validate(self) -> None:
        self.align.validate()
        if self.steps < 0 or self.batch_size < 1 or self.texts_per_image < 1:
            raise ConfigInvalid("steps >= 0, batch_size >= 1 and texts_per_image >= 1 required")
        if self.relations not in ("concept", "patient"):
            raise ConfigInvalid(f"unknown relation mode {self.relations!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigInvalid(f"unknown optimizer {self.optimizer!r}")


def relations_for(samples, studies, tc: TrainConfig, oracle=rule_oracle) -> RelationMatrix:
    if tc.relations == "patient":
        return patient_relation_matrix(samples, studies)
    return build_relation_matrix(samples, studies, oracle, fail_open=tc.fail_open, mining=tc.mining)


def draw_batch(records: Sequence[StudyRecord], tc: TrainConfig, step: int) -> tuple[list[StudyRecord], int]:
    """B studies with distinct patients and the sampling seed for ``step``."""
    rng = stream(tc.seed, "sampling", step)
    by_patient: dict[str, list[StudyRecord]] = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    patients = list(by_patient)
    b = min(tc.batch_size, len(patients))
    chosen = rng.choice(len(patients), size=b, replace=False)
    studies = []
    for k in chosen:
        group = by_patient[patients[int(k)]]
        studies.append(group[int(rng.integers(len(group)))])
    return studies, int(rng.integers(2**63))


def fit(
    records: Sequence[StudyRecord],
    images: Mapping[str, object],
    model: DualEncoder,
    tc: TrainConfig,
    oracle=rule_oracle,
    on_step: Optional[Callable[[int, float, float], None]] = None,
) -> tuple[DualEncoder, list[float]]:
    """Run ``tc.steps`` training steps; returns the final model and losses."""
    tc.validate()
    usable = [r for r in records if r.known_entries()]
    if not usable:
        raise ConfigInvalid("no trainable study (every study lacks known concepts)")
    descriptors = {r.image_ref: patch_descriptors(images[r.image_ref], model.grid) for r in usable}
    adam = AdamState() if tc.optimizer == "adam" else None
    losses = []
    for step in range(tc.steps):
        t0 = time.perf_counter()
        studies, plan_seed = draw_batch(usable, tc, step)
        plan = BatchPlan(studies, N=tc.texts_per_image, p_counterfactual=tc.p_counterfactual, seed=plan_seed)
        samples = sample_texts(plan)
        relations = relations_for(samples, studies, tc, oracle)
        batch = make_batch(samples, studies, descriptors, model.hash_buckets)
        if adam is None:
            model, loss = train_step(batch, relations, model, tc.align)
        else:
            model, loss = adam_step(batch, relations, model, tc.align, adam)
        losses.append(loss)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        if on_step is not None:
            on_step(step, loss, wall_ms)
        log.debug("step %d loss %.6f (%.1f ms)", step, loss, wall_ms)
    return model, losses
