"""Losses, AMSGrad and mini-batch construction for the three training regimes.

Regimes:

* ``baseline`` - whole crop -> one embedding -> cross-entropy.
* ``sa``       - crop split into K segments, embeddings averaged; the
                 aggregate head and one head per segment are all trained.
* ``sa_ts``    - ``sa`` plus distillation from a frozen baseline teacher
                 (cosine distance of embeddings and soft-label cross-entropy).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .model import Model
from .numerics import Tensor
from .segmentation import SegmentSpec, aggregate, segment_batch

REGIMES = ("baseline", "sa", "sa_ts")
DEFAULT_W = {"baseline": 0.0, "sa": 0.2, "sa_ts": 1.0}


@dataclass
class LossWeights:
    W: float = 0.2
    ts_enabled: bool = False

    def __post_init__(self):
        if self.W < 0:
            raise ValueError("segment loss weight W must be >= 0")


@dataclass
class BatchSpec:
    batch_size: int
    crop_length: int
    num_speakers: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def pre_emphasize(x, coeff: float = 0.97) -> np.ndarray:
    """First-order high-pass ``y[t] = x[t] - coeff * x[t-1]`` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    y = x.copy()
    y[..., 1:] -= coeff * x[..., :-1]
    return y


# -- losses ----------------------------------------------------------------------

def loss_sa(aggregate_logits: Tensor, segment_logits: Sequence[Tensor], labels, W: float) -> Tensor:
    """Aggregate cross-entropy plus ``W`` times the summed per-segment cross-entropies."""
    loss = nx.softmax_cce(aggregate_logits, labels)
    if W == 0:
        return loss
    if not segment_logits:
        raise ValueError("loss_sa: W > 0 but no segment logits were given")
    seg = nx.softmax_cce(segment_logits[0], labels)
    for logits in segment_logits[1:]:
        seg = seg + nx.softmax_cce(logits, labels)
    return loss + W * seg


def ts_terms(
    teacher_embedding,
    teacher_logits,
    student_embedding: Tensor,
    student_logits: Tensor,
) -> Tuple[Tensor, Tensor]:
    """(sum_j 1 - cos(e_T, e_S), -sum_j sum_i P_T log P_S) over a batch.

    Teacher quantities are treated as constants.
    """
    e_t = np.asarray(getattr(teacher_embedding, "data", teacher_embedding))
    z_t = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    if e_t.shape != student_embedding.shape:
        raise nx.DimensionError(
            f"teacher embedding {e_t.shape} and student embedding {student_embedding.shape} differ"
        )
    cos = nx.cosine_similarity(Tensor(e_t), student_embedding)
    cos_term = (1.0 - cos).sum()
    p_t = nx.softmax(z_t)
    soft_term = -(Tensor(p_t) * nx.log_softmax(student_logits)).sum()
    return cos_term, soft_term


# -- forward pipelines ----------------------------------------------------------

def sa_forward(model: Model, waves: np.ndarray, spec: SegmentSpec) -> Tuple[Tensor, Tensor]:
    """Segment each utterance, embed all segments in one batch, average per utterance.

    Returns ``(aggregate [B, D], segment embeddings [B, K, D])``.
    """
    segments, k = segment_batch(waves, spec)
    emb = model.forward_embedding(segments)
    per_utt = emb.reshape(len(waves), k, emb.shape[-1])
    return aggregate(per_utt), per_utt


def teacher_outputs(teacher: Model, waves: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if not teacher.frozen:
        raise ValueError("the teacher model must be frozen")
    with nx.no_grad():
        e_t = teacher.forward_embedding(waves)
        z_t = teacher.forward_logits(e_t)
    return e_t.data, z_t.data


def loss_ts(teacher: Model, student: Model, waves: np.ndarray, spec: SegmentSpec) -> Tensor:
    """Distillation loss with teacher and student fed the same utterances."""
    e_t, z_t = teacher_outputs(teacher, waves)
    e_s, _ = sa_forward(student, waves, spec)
    cos_term, soft_term = ts_terms(e_t, z_t, e_s, student.forward_logits(e_s))
    return cos_term + soft_term


def total_loss(
    regime: str,
    model: Model,
    waves: np.ndarray,
    labels,
    spec: Optional[SegmentSpec] = None,
    W: Optional[float] = None,
    teacher: Optional[Model] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """Loss of one mini-batch under ``regime`` plus a dict of its named terms."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if regime == "baseline":
        loss = nx.softmax_cce(model.forward_logits(model.forward_embedding(waves)), labels)
        return loss, {"cce": loss.item()}

    if regime == "sa_ts" and teacher is None:
        raise ValueError("regime sa_ts requires a teacher model")
    if spec is None:
        raise ValueError(f"regime {regime} requires a segment spec")
    W = DEFAULT_W[regime] if W is None else W
    agg, per_utt = sa_forward(model, waves, spec)
    k = per_utt.shape[1]
    if W > 0 and k > model.config.num_segment_output_layers:
        raise ValueError(
            f"{k} segments per utterance but the model has "
            f"{model.config.num_segment_output_layers} segment heads"
        )
    agg_logits = model.forward_logits(agg)
    seg_logits = [model.forward_logits(per_utt[:, i, :], i) for i in range(k)] if W > 0 else []
    loss = loss_sa(agg_logits, seg_logits, labels, W)
    terms = {"sa": loss.item()}
    if regime == "sa_ts":
        e_t, z_t = teacher_outputs(teacher, waves)
        cos_term, soft_term = ts_terms(e_t, z_t, agg, agg_logits)
        loss = loss + cos_term + soft_term
        terms.update(cos=cos_term.item(), soft=soft_term.item())
    terms["total"] = loss.item()
    return loss, terms


# -- optimizer -------------------------------------------------------------------

class AMSGrad:
    """Adam with the max-of-second-moments correction and L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.v_hat = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v, v_hat in zip(self.params, self.m, self.v, self.v_hat):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            np.maximum(v_hat, v, out=v_hat)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v_hat / c2) + self.eps)


def amsgrad_step(params: Sequence[Tensor], optimizer: AMSGrad) -> None:
    if [id(p) for p in params] != [id(p) for p in optimizer.params]:
        raise ValueError("optimizer state was built for a different parameter list")
    optimizer.step()


# -- batching --------------------------------------------------------------------

def crop(x: np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    """``length`` samples from ``offset``, zero-padded when the source is short."""
    out = np.zeros(length)
    piece = x[offset:offset + length]
    out[: len(piece)] = piece
    return out


def make_batch(
    waves: List[np.ndarray],
    labels: Sequence[int],
    spec: BatchSpec,
    rng: np.random.Generator,
    pre_emphasis: float = 0.97,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random utterances, each cropped to ``spec.crop_length`` at a random offset."""
    if not waves:
        raise ValueError("cannot draw a batch from an empty corpus")
    idx = rng.integers(0, len(waves), size=spec.batch_size)
    batch = np.empty((spec.batch_size, spec.crop_length))
    for row, i in enumerate(idx):
        x = waves[i]
        offset = int(rng.integers(0, max(len(x) - spec.crop_length, 0) + 1))
        batch[row] = crop(x, spec.crop_length, offset)
    return pre_emphasize(batch, pre_emphasis), np.asarray(labels)[idx]
