"""Finite-difference verification of the hand-written gradients.

Two suites:

* ``check_score_gradients`` compares :func:`ca_nce_grad_u` against central
  differences of the loss on random score matrices.  The differences are
  evaluated in extended precision and only the row and column touched by a
  perturbation are recomputed, so cancellation does not swamp tiny entries
  and a pure elementwise relative error is meaningful.
* ``check_param_gradients`` compares :func:`backward_to_params` against
  float64 central differences of the end-to-end loss on 2-image micro-batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import mpmath
import numpy as np

from .alignment import (
    AlignConfig,
    MaskPair,
    backward_to_params,
    batch_loss,
    ca_nce_grad_u,
    forward,
    make_batch,
    masks_from_relations,
)
from .batching import BatchPlan, sample_texts
from .encoders import init_encoder, patch_descriptors
from .ontology import default_vocabulary
from .relabel import build_relation_matrix
from .synthgen import GenConfig, generate

FD_STEP = 1e-5
SCORE_TOL = 1e-5
PARAM_TOL = 1e-4
_DPS = 40


def relative_error(analytic, numeric) -> np.ndarray:
    """|a - f| / max(|a|, |f|), with 0/0 taken as 0."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(f))
    diff = np.abs(a - f)
    return np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)


def random_masks(rng: np.random.Generator, rows: int, cols: int, p=(0.3, 0.4, 0.3)) -> MaskPair:
    """Random {1, 0, ignored} masks with at least one positive."""
    codes = rng.choice([1, 0, -1], size=(rows, cols), p=list(p))
    if not (codes == 1).any():
        codes[int(rng.integers(rows)), int(rng.integers(cols))] = 1
    return MaskPair(codes == 1, codes != -1)


def _term(x, pos, valid, eps):
    # one row (or column) of the loss in extended precision
    den = mpmath.fsum(mpmath.exp(v) for v, m in zip(x, valid) if m) + eps
    num = mpmath.fsum(mpmath.exp(v) for v, m in zip(x, pos) if m)
    return mpmath.log(den) - mpmath.log(num)


def fd_score_gradient(u, masks: MaskPair, cfg: AlignConfig, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of the total loss with respect to ``u``."""
    u = np.asarray(u, dtype=np.float64)
    pos, valid = masks.m_pos > 0, masks.m_valid > 0
    rows_with = pos.any(axis=1)
    cols_with = pos.any(axis=0)
    n_rows, n_cols = int(rows_with.sum()), int(cols_with.sum())
    out = np.zeros_like(u)
    with mpmath.workdps(_DPS):
        tau = mpmath.mpf(cfg.tau_loss)
        eps = mpmath.mpf(cfg.epsilon)
        hh = mpmath.mpf(h)
        x = [[mpmath.mpf(v) / tau for v in row] for row in u]
        for i, j in zip(*np.nonzero(valid)):
            total = mpmath.mpf(0)
            for sign in (1, -1):
                shift = sign * hh / tau
                part = mpmath.mpf(0)
                if rows_with[i]:
                    row = list(x[i])
                    row[j] += shift
                    part += _term(row, pos[i], valid[i], eps) / n_rows
                if cols_with[j]:
                    col = [x[r][j] for r in range(u.shape[0])]
                    col[i] += shift
                    part += _term(col, pos[:, j], valid[:, j], eps) / n_cols
                total += sign * part
            out[i, j] = float(total / (2 * hh))
    return out


@dataclass
class GradReport:
    score_max_rel: float
    param_max_rel: float
    ignored_exact_zero: bool
    cases: int

    @property
    def ok(self) -> bool:
        return (
            self.score_max_rel <= SCORE_TOL
            and self.param_max_rel <= PARAM_TOL
            and self.ignored_exact_zero
        )

    def line(self) -> str:
        return (
            f"max-rel-err scores={self.score_max_rel:.3e} (tol {SCORE_TOL:.0e}) "
            f"params={self.param_max_rel:.3e} (tol {PARAM_TOL:.0e}) "
            f"ignored-zero={'yes' if self.ignored_exact_zero else 'NO'} cases={self.cases}"
        )


def check_score_gradients(seed: int, n_cases: int = 20, rows: int = 32, cols: int = 8, cfg=None):
    """Worst relative error and the exact-zero flag over ``n_cases`` instances."""
    cfg = cfg or AlignConfig()
    rng = np.random.default_rng(seed)
    worst, zero_ok = 0.0, True
    for _ in range(n_cases):
        r = int(rng.integers(1, rows + 1))
        c = int(rng.integers(1, cols + 1))
        u = rng.uniform(-1.0, 1.0, size=(r, c))
        masks = random_masks(rng, r, c)
        g = ca_nce_grad_u(u, masks, cfg)
        fd = fd_score_gradient(u, masks, cfg)
        worst = max(worst, float(relative_error(g, fd).max()))
        zero_ok &= bool(np.all(g[masks.m_valid == 0] == 0.0))
    return worst, zero_ok


def micro_batch(seed: int, n_texts: int = 1):
    """A 2-image batch from a small synthetic set plus its relation matrix.

    Draws are repeated until the matrix holds a Negative cell; without one
    the loss is an epsilon-sized remainder that float64 differences cannot
    resolve.
    """
    for attempt in range(1000):
        sub = seed * 1000 + attempt
        records, images = generate(
            GenConfig(n_studies=2, vocab=default_vocabulary(4), p_present=0.5, p_unknown=0.0, seed=sub)
        )
        samples = sample_texts(BatchPlan(records, N=n_texts, p_counterfactual=0.0, seed=sub))
        rel = build_relation_matrix(samples, records)
        if (rel.codes == 0).any():
            break
    model = init_encoder(seed)
    desc = {r.image_ref: patch_descriptors(images[r.image_ref], model.grid) for r in records}
    return make_batch(samples, records, desc, model.hash_buckets), rel, model


def check_param_gradients(seed: int, n_cases: int = 3, cfg=None, h: float = FD_STEP) -> float:
    """Worst relative error of every parameter that some text or patch touches."""
    cfg = cfg or AlignConfig()
    worst = 0.0
    for case in range(n_cases):
        batch, rel, model = micro_batch(seed * 100 + case)
        sim = forward(batch, model, cfg)
        masks = masks_from_relations(rel)
        grads = backward_to_params(batch, sim, ca_nce_grad_u(sim.u, masks, cfg), model, cfg)
        used_rows = np.flatnonzero(np.abs(batch.bags).sum(axis=0) > 0)
        for name, arr in model.arrays().items():
            if name == "embedding_table":
                index = [(r, d) for r in used_rows for d in range(arr.shape[1])]
            else:
                index = list(np.ndindex(arr.shape))
            fd = np.empty(len(index))
            for k, pos in enumerate(index):
                old = arr[pos]
                arr[pos] = old + h
                up = batch_loss(batch, rel, model, cfg)
                arr[pos] = old - h
                down = batch_loss(batch, rel, model, cfg)
                arr[pos] = old
                fd[k] = (up - down) / (2 * h)
            analytic = np.array([grads[name][pos] for pos in index])
            worst = max(worst, float(relative_error(analytic, fd).max()))
    return worst


def run_suite(seed: int = 0, score_cases: int = 20, param_cases: int = 2) -> GradReport:
    score_err, zero_ok = check_score_gradients(seed, score_cases)
    param_err = check_param_gradients(seed, param_cases)
    return GradReport(score_err, param_err, zero_ok, score_cases + param_cases)
