"""Scalar training objectives.

Contrastive losses normalise their inputs internally, so callers pass raw exit
representations (which the classifier also consumes un-normalised). Class
labels are 0-based indices throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_TEMPERATURE = 0.5
DEFAULT_LAMBDA = 0.02


class DegenerateBatchWarning(UserWarning):
    """No anchor in a contrastive batch has a positive partner."""


def _labels(labels, name="labels") -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} must be non-negative class indices")
    return arr


@dataclass
class ContrastiveBatch:
    """A set of representations with labels, ready for the supervised contrastive loss.

    Entries with ``is_anchor`` false still appear as positives and in every
    denominator; they just do not add their own term to the outer sum.
    Stop-gradient entries are detached when the batch is built.
    """

    reps: Tensor
    labels: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    is_anchor: np.ndarray | None = None
    stop_gradient: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = _labels(self.labels)
        n = self.labels.size
        if self.reps.ndim != 2 or self.reps.shape[0] != n:
            raise ValueError(f"reps shape {self.reps.shape} does not match {n} labels")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.is_anchor is None:
            self.is_anchor = np.ones(n, dtype=bool)
        if self.stop_gradient is None:
            self.stop_gradient = np.zeros(n, dtype=bool)

    @classmethod
    def build(cls, parts: Sequence[tuple[Tensor, Sequence[int], bool]],
              temperature: float = DEFAULT_TEMPERATURE) -> "ContrastiveBatch":
        """Concatenate ``(reps, labels, stop_gradient)`` parts into one batch."""
        parts = [p for p in parts if p[0].shape[0] > 0]
        if not parts:
            raise ValueError("empty contrastive batch")
        dims = {p[0].shape[1] for p in parts}
        if len(dims) != 1:
            raise ValueError(f"representation widths differ: {sorted(dims)}")
        reps = [T.detach(r) if sg else r for r, _, sg in parts]
        labels = np.concatenate([_labels(lab) for _, lab, _ in parts])
        stop = np.concatenate([np.full(r.shape[0], sg) for r, _, sg in parts])
        joined = reps[0] if len(reps) == 1 else T.concat(reps, axis=0)
        return cls(joined, labels, temperature, stop_gradient=stop)

    def __len__(self):
        return int(self.labels.size)

    def positive_counts(self) -> np.ndarray:
        """Entries sharing each entry's label, itself included."""
        return (self.labels[:, None] == self.labels[None, :]).sum(axis=1)

    def valid_anchors(self) -> np.ndarray:
        return self.is_anchor & (self.positive_counts() >= 2)


def _zero_like(reps: Tensor) -> Tensor:
    # stays on the tape so a backward pass yields exact zero gradients
    return T.scale(T.sum(reps), 0.0)


def scl_loss(batch: ContrastiveBatch) -> Tensor:
    """Supervised contrastive loss summed over valid anchors.

    Each anchor's term is the mean negative log-probability of its positives,
    where probabilities come from a temperature-scaled softmax of cosine
    similarities over every other entry (self excluded).
    """
    n = len(batch)
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 entries")
    valid = batch.valid_anchors()
    if not valid.any():
        warnings.warn("no anchor has a positive; contrastive loss is 0", DegenerateBatchWarning,
                      stacklevel=2)
        return _zero_like(batch.reps)

    z = T.l2_normalize(batch.reps)
    sim = T.scale(T.matmul(z, T.transpose(z)), 1.0 / batch.temperature)
    sim = T.add_const(sim, np.diag(np.full(n, T.MASK_VALUE)))
    logp = T.log_softmax(sim)

    same = batch.labels[:, None] == batch.labels[None, :]
    np.fill_diagonal(same, False)
    counts = batch.positive_counts()
    weights = np.where(same & valid[:, None], 1.0 / np.maximum(counts - 1, 1)[:, None], 0.0)
    return T.scale(T.sum(T.mul_const(logp, weights)), -1.0)


def acl_embed_loss(sample_reps: Tensor, labels, label_embeds: Tensor,
                   temperature: float = DEFAULT_TEMPERATURE,
                   label_ids: Sequence[int] | None = None) -> Tensor:
    """Contrastive loss over the batch augmented with one embedding per class.

    ``label_embeds`` row ``k`` is the classifier's vector for class ``label_ids[k]``
    (``k`` by default). Gradients reach the classifier through these rows.
    """
    k = label_embeds.shape[0]
    label_ids = np.arange(k) if label_ids is None else _labels(label_ids, "label_ids")
    if np.unique(label_ids).size != label_ids.size:
        raise ValueError("duplicate labels among label embeddings")
    batch = ContrastiveBatch.build(
        [(sample_reps, labels, False), (label_embeds, label_ids, False)], temperature)
    return scl_loss(batch)


def acl_cl_loss(student_reps: Tensor, student_label_embeds: Tensor,
                teacher_reps: Tensor, teacher_label_embeds: Tensor, labels,
                temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Cross-layer contrastive loss on 2N+2K entries; teacher entries are stop-gradient."""
    if student_reps.shape[1] != teacher_reps.shape[1]:
        raise ValueError(
            f"student width {student_reps.shape[1]} != teacher width {teacher_reps.shape[1]}")
    if teacher_reps.shape[0] != student_reps.shape[0]:
        raise ValueError("teacher and student must describe the same samples")
    k = student_label_embeds.shape[0]
    if teacher_label_embeds.shape[0] != k:
        raise ValueError("teacher and student must have the same number of classes")
    ids = np.arange(k)
    batch = ContrastiveBatch.build([
        (student_reps, labels, False),
        (student_label_embeds, ids, False),
        (teacher_reps, labels, True),
        (teacher_label_embeds, ids, True),
    ], temperature)
    return scl_loss(batch)


def info_nce_loss(anchors: Tensor, positives: Tensor,
                  temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Self-supervised InfoNCE: anchor ``i`` is paired with ``positives[i]``.

    The contrast set of anchor ``i`` is every other vector of the 2N pool, so
    it holds one positive and 2N-2 negatives. Averaged over the N anchors.
    """
    n = anchors.shape[0]
    if n < 2:
        raise ValueError("InfoNCE needs at least 2 anchors")
    if positives.shape != anchors.shape:
        raise ValueError("anchors and positives must have the same shape")
    za = T.l2_normalize(anchors)
    pool = T.concat([za, T.l2_normalize(positives)], axis=0)
    sim = T.scale(T.matmul(za, T.transpose(pool)), 1.0 / temperature)
    self_mask = np.zeros((n, 2 * n))
    self_mask[np.arange(n), np.arange(n)] = T.MASK_VALUE
    logp = T.log_softmax(T.add_const(sim, self_mask))
    pick = np.zeros((n, 2 * n))
    pick[np.arange(n), n + np.arange(n)] = 1.0
    return T.scale(T.sum(T.mul_const(logp, pick)), -1.0 / n)


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = _labels(labels)
    n, k = logits.shape
    if labels.size != n:
        raise ValueError(f"{labels.size} labels for {n} rows of logits")
    if labels.size and labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return T.scale(T.sum(T.mul_const(T.log_softmax(logits), onehot)), -1.0 / n)


def kd_loss(student_logits: Tensor, teacher_logits: np.ndarray, temperature: float = 2.0) -> Tensor:
    """Soft-target cross-entropy against fixed teacher logits at ``temperature``."""
    t = np.asarray(teacher_logits, dtype=np.float64) / temperature
    t = t - t.max(axis=-1, keepdims=True)
    target = np.exp(t) / np.exp(t).sum(axis=-1, keepdims=True)
    logp = T.log_softmax(T.scale(student_logits, 1.0 / temperature))
    return T.scale(T.sum(T.mul_const(logp, target)), -1.0 / student_logits.shape[0])


@dataclass
class LossBundle:
    ce: Tensor
    contrastive: Tensor
    combined: Tensor
    lambda_used: float


def combine(ce: Tensor, contrastive: Tensor, lam: float) -> LossBundle:
    """``(1 - lam) * ce + lam * contrastive``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    combined = T.add(T.scale(ce, 1.0 - lam), T.scale(contrastive, lam))
    return LossBundle(ce, contrastive, combined, float(lam))
