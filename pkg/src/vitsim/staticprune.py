"""Static block-weight pruning.

Scores are supplied from outside (a file or the seeded generator); nothing here
computes gradients.  Masks come from a deterministic top-k: ties go to the
smaller flat index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_softmax

from .blockmat import PruneMask, partition_dense, compress, decompress
from .errors import InvalidArgument


def keep_count(total: int, rate: float) -> int:
    """``ceil(total * rate)`` that ignores float noise like ``0.7 * 10``."""
    return min(total, math.ceil(round(total * rate, 9)))


def _check_rate(rate: float, name: str = "r_b"):
    if not (0 < rate <= 1):
        raise InvalidArgument(f"{name} must be in (0, 1], got {rate}")


def _top_k_flat(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -score keeps the smaller index first among ties
    order = np.argsort(-scores, kind="stable")
    keep = np.zeros(scores.size, dtype=bool)
    keep[order[:k]] = True
    return keep


@dataclass(frozen=True)
class SparsitySchedule:
    initial: float = 1.0
    final: float = 0.5
    warmup: int = 0
    ramp: int = 1
    total: int = 1

    def __post_init__(self):
        if not (0 < self.final <= self.initial <= 1):
            raise InvalidArgument("need 0 < final <= initial <= 1")
        if self.warmup < 0 or self.ramp < 0 or self.warmup + self.ramp > self.total:
            raise InvalidArgument("need warmup + ramp <= total")


@dataclass(frozen=True)
class PruneLossParams:
    penalty: float = 0.0
    distill_weight: float = 1.0
    normal_weight: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.penalty < 0:
            raise InvalidArgument("penalty weight must be >= 0")
        if self.temperature <= 0:
            raise InvalidArgument("temperature must be > 0")


def generate_mask(scores, r_b: float) -> PruneMask:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.size == 0:
        raise InvalidArgument(f"score matrix must be a non-empty 2-D grid, got shape {s.shape}")
    _check_rate(r_b)
    if not np.isfinite(s).all():
        raise InvalidArgument("scores must be finite")
    keep = _top_k_flat(s.reshape(-1), keep_count(s.size, r_b))
    return PruneMask(keep.reshape(s.shape))


def generate_neuron_mask(scores, r_b: float) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise InvalidArgument("neuron score vector is empty")
    _check_rate(r_b)
    return _top_k_flat(s, keep_count(s.size, r_b))


def _head_span(num_heads: int, head_dim: int, b: int, extent: int) -> int:
    if head_dim % b:
        raise InvalidArgument(f"head_dim {head_dim} is not a multiple of block size {b}")
    per_head = head_dim // b
    if per_head * num_heads != extent:
        raise InvalidArgument(f"{num_heads} heads x {per_head} blocks != {extent} blocks")
    return per_head


def dead_heads(masks_p: Sequence[PruneMask], mask_proj: PruneMask, num_heads: int,
               head_dim: int, b: int) -> list[int]:
    """Heads with no surviving block in any of ``masks_p`` columns or ``mask_proj`` rows."""
    out = []
    for mp in masks_p:
        _head_span(num_heads, head_dim, b, mp.shape[1])
    per = _head_span(num_heads, head_dim, b, mask_proj.shape[0])
    for h in range(num_heads):
        sl = slice(h * per, (h + 1) * per)
        if any(not mp.grid[:, sl].any() for mp in masks_p) or not mask_proj.grid[sl, :].any():
            out.append(h)
    return out


def apply_alternate_pattern(mask_p, mask_proj: PruneMask, num_heads: int, head_dim: int,
                            b: int | None = None):
    """Zero every head that is already empty in one of the paired matrices.

    ``mask_p`` may be one mask or a sequence (e.g. the q, k, v masks); a head
    empty in any of them, or in the rows of ``mask_proj``, is removed from all.
    Returns ``(masks_p, mask_proj, removed_heads)`` with ``masks_p`` shaped like
    the input.
    """
    single = isinstance(mask_p, PruneMask)
    masks = [mask_p] if single else list(mask_p)
    if b is None:
        # head_dim given in blocks
        b = 1
    for mp in masks:
        if mp.shape[0] != mask_proj.shape[1] or mp.shape[1] != mask_proj.shape[0]:
            raise InvalidArgument(f"mask grids {mp.shape} and {mask_proj.shape} are not transposed pairs")
    removed = dead_heads(masks, mask_proj, num_heads, head_dim, b)
    per = head_dim // b
    new_p = []
    for mp in masks:
        g = mp.grid.copy()
        for h in removed:
            g[:, h * per:(h + 1) * per] = False
        new_p.append(PruneMask(g))
    gp = mask_proj.grid.copy()
    for h in removed:
        gp[h * per:(h + 1) * per, :] = False
    return (new_p[0] if single else tuple(new_p)), PruneMask(gp), removed


@dataclass(frozen=True)
class EncoderMasks:
    q: PruneMask
    k: PruneMask
    v: PruneMask
    proj: PruneMask
    neurons: np.ndarray
    removed_heads: tuple[int, ...] = ()


def head_retained_ratio(masks: Sequence[EncoderMasks], num_heads: int) -> float:
    if not masks:
        return 1.0
    kept = sum(num_heads - len(m.removed_heads) for m in masks)
    return kept / (len(masks) * num_heads)


def cubic_density(step: int, sched: SparsitySchedule) -> float:
    t0, dt = sched.warmup, sched.ramp
    if step <= t0:
        return sched.initial
    if step >= t0 + dt:
        return sched.final
    frac = 1.0 - (step - t0) / dt
    return sched.final + (sched.initial - sched.final) * frac ** 3


def sparsity_penalty(scores: Iterable, penalty: float) -> float:
    if penalty < 0:
        raise InvalidArgument("penalty weight must be >= 0")
    total = math.fsum(float(expit(np.asarray(s, dtype=np.float64)).sum()) for s in scores)
    return penalty * total


def distill_loss(teacher_logits, student_logits, temperature: float) -> float:
    t = np.asarray(teacher_logits, dtype=np.float64).reshape(-1)
    s = np.asarray(student_logits, dtype=np.float64).reshape(-1)
    if t.shape != s.shape:
        raise InvalidArgument(f"logit length mismatch: {t.size} vs {s.size}")
    if temperature <= 0:
        raise InvalidArgument("temperature must be > 0")
    lp_t = log_softmax(t / temperature)
    lp_s = log_softmax(s / temperature)
    kl = float(np.sum(np.exp(lp_t) * (lp_t - lp_s)))
    return temperature ** 2 * max(kl, 0.0)


def combined_loss(distill: float, normal: float, params: PruneLossParams) -> float:
    return params.distill_weight * distill + params.normal_weight * normal


# -- model-level pruning ------------------------------------------------------

MSA_KEYS = ("q", "k", "v", "proj")


def neuron_scores(enc_scores: dict) -> np.ndarray:
    """One ranking for both MLP matrices, so W_int columns and W_out rows agree."""
    s_int = np.asarray(enc_scores["int"], dtype=np.float64)
    s_out = np.asarray(enc_scores["out"], dtype=np.float64)
    if s_int.shape != s_out.shape:
        raise InvalidArgument("int/out neuron score vectors differ in length")
    return s_int + s_out


def encoder_masks(enc_scores: dict, r_b: float, num_heads: int, head_dim: int, b: int) -> EncoderMasks:
    q, k, v, proj = (generate_mask(enc_scores[key], r_b) for key in MSA_KEYS)
    (q, k, v), proj, removed = apply_alternate_pattern((q, k, v), proj, num_heads, head_dim, b)
    neurons = generate_neuron_mask(neuron_scores(enc_scores), r_b)
    return EncoderMasks(q, k, v, proj, neurons, tuple(removed))


def prune_encoder(weights, masks: EncoderMasks):
    """Apply masks to one encoder: block-sparse MSA, compacted MLP."""

    b = weights.b
    dh = weights.head_dim
    sparse = {}
    for key in MSA_KEYS:
        w = getattr(weights, "w" + key)
        m = getattr(masks, key)
        if m.shape != w.grid:
            raise InvalidArgument(f"w{key}: mask grid {m.shape} != weight grid {w.grid}")
        sparse[key] = compress(decompress(w), m)
    keep = np.asarray(masks.neurons, dtype=bool)
    if keep.size != weights.w_int.shape[1]:
        raise InvalidArgument(f"neuron mask length {keep.size} != mlp width {weights.w_int.shape[1]}")
    w_int = weights.w_int.to_array()[:, keep]
    w_out = weights.w_out.to_array()[keep, :]
    b_int = weights.b_int[keep]
    bq, bk, bv = (weights.bq.copy(), weights.bk.copy(), weights.bv.copy())
    for h in masks.removed_heads:
        sl = slice(h * dh, (h + 1) * dh)
        bq[sl] = bk[sl] = bv[sl] = 0.0
    return replace(
        weights,
        wq=sparse["q"], wk=sparse["k"], wv=sparse["v"], wproj=sparse["proj"],
        w_int=partition_dense(w_int, b), w_out=partition_dense(w_out, b),
        bq=bq, bk=bk, bv=bv, b_int=b_int,
    )


def prune_model(model, scores: Sequence[dict], r_b: float, b: int | None = None):
    """Prune every encoder of ``model``; returns ``(pruned_model, masks)``."""
    cfg = model.config
    if b is not None and b != cfg.block_size:
        raise InvalidArgument(f"block size {b} differs from the model's {cfg.block_size}; re-block first")
    if len(scores) != cfg.depth:
        raise InvalidArgument(f"{len(scores)} score sets for {cfg.depth} encoders")
    _check_rate(r_b)
    masks, encoders = [], []
    for enc, sc in zip(model.encoders, scores):
        m = encoder_masks(sc, r_b, cfg.num_heads, cfg.head_dim, cfg.block_size)
        masks.append(m)
        encoders.append(prune_encoder(enc, m))
    return replace(model, encoders=tuple(encoders)), masks


def count_parameters(model) -> int:
    """Stored parameters: surviving weight blocks, MLP matrices, biases, norms, embeddings."""
    total = model.embedding.parameter_count()
    for enc in model.encoders:
        b2 = enc.b * enc.b
        for key in MSA_KEYS:
            w = getattr(enc, "w" + key)
            total += w.nnz_blocks * b2
        total += enc.w_int.shape[0] * enc.w_int.shape[1] + enc.w_out.shape[0] * enc.w_out.shape[1]
        total += sum(v.size for v in (enc.bq, enc.bk, enc.bv, enc.b_proj, enc.b_int, enc.b_out))
        total += sum(v.size for v in (enc.ln1_gain, enc.ln1_bias, enc.ln2_gain, enc.ln2_bias))
    return int(total)


def measured_ratios(enc) -> dict:
    """Retained ratios of one pruned encoder as exact fractions."""
    from fractions import Fraction

    live = enc.live_heads()
    per = enc.head_dim // enc.b
    d_blocks = enc.wq.grid[0]
    h_kept = len(live)
    if h_kept == 0:
        return {"alpha": Fraction(0), "alpha_proj": Fraction(0), "h_kept": 0,
                "alpha_mlp": Fraction(enc.w_int.shape[1], enc.mlp_dim)}
    nnz_qkv = sum(getattr(enc, "w" + k).nnz_blocks for k in "qkv")
    alpha = Fraction(nnz_qkv, 3 * h_kept * per * d_blocks)
    alpha_proj = Fraction(enc.wproj.nnz_blocks, h_kept * per * enc.wproj.grid[1])
    return {
        "alpha": alpha,
        "alpha_proj": alpha_proj,
        "h_kept": h_kept,
        "alpha_mlp": Fraction(enc.w_int.shape[1], enc.mlp_dim),
    }


# -- fine-pruning replay -----------------------------------------------------

@dataclass
class StepRecord:
    step: int
    density: float
    distill: float
    normal: float
    penalty: float
    total: float
    head_retained_ratio: float


def cross_entropy(logits, label: int) -> float:
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[label])


def replay_fine_pruning(model, teacher: Callable, snapshots: Sequence[Sequence[dict]],
                        sched: SparsitySchedule, inputs: Sequence, labels: Sequence[int],
                        params: PruneLossParams = PruneLossParams()) -> list[StepRecord]:
    """Walk the fine-pruning loop over recorded score snapshots.

    For every step the density comes from the cubic schedule, masks are
    rebuilt from that step's scores, and the student (with token dropping at
    the configured layers) and teacher are run on every input to produce the
    loss terms.  No parameters are updated.
    """
    from .vitref import model_forward

    if len(snapshots) != sched.total + 1:
        raise InvalidArgument(f"need {sched.total + 1} score snapshots, got {len(snapshots)}")
    records = []
    for step, scores in enumerate(snapshots):
        density = cubic_density(step, sched)
        student, masks = prune_model(model, scores, density)
        distill = normal = 0.0
        for x, y in zip(inputs, labels):
            z_s = model_forward(x, student)
            z_t = teacher(x)
            distill += distill_loss(z_t, z_s, params.temperature)
            normal += cross_entropy(z_s, y)
        n = max(len(inputs), 1)
        flat = [s[k] for s in scores for k in (*MSA_KEYS, "int", "out")]
        pen = sparsity_penalty(flat, params.penalty)
        normal = normal / n + pen
        distill /= n
        records.append(StepRecord(step, density, distill, normal, pen,
                                  combined_loss(distill, normal, params),
                                  head_retained_ratio(masks, model.config.num_heads)))
    return records
