"""Identity classification with label smoothing, batch-hard triplet, weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, LabelError, NumericError, ParameterError
from .tensor import Tensor

LOG_FLOOR = float(np.log(1e-12))


def smoothed_targets(y, num_classes: int, epsilon: float) -> np.ndarray:
    """Label-smoothed target rows; accepts a scalar label or an array of labels."""
    if not 0.0 <= epsilon < 1.0:
        raise ParameterError(f"epsilon must lie in [0, 1), got {epsilon}")
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes}): {labels.tolist()}")
    q = np.full((labels.size, num_classes), epsilon / num_classes)
    q[np.arange(labels.size), labels] = 1.0 - epsilon + epsilon / num_classes
    return q[0] if np.ndim(y) == 0 else q


def id_loss(logits: Tensor, q: np.ndarray) -> Tensor:
    """Mean over samples of -sum_i q_i log p_i, p = softmax(logits), p floored at 1e-12."""
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits in identity loss")
    logp = T.clamp_min(T.log_softmax(logits, axis=-1), LOG_FLOOR)
    per_sample = T.sum_(logp * Tensor(q), axis=-1)
    return T.neg(T.mean(per_sample))


def pairwise_distances(features: Tensor) -> Tensor:
    diff = features.reshape(features.shape[0], 1, -1) - features.reshape(1, features.shape[0], -1)
    sq = T.sum_(diff * diff, axis=-1)
    # keeps the derivative finite on the diagonal
    return T.sqrt(T.clamp_min(sq, 1e-24))


@dataclass
class TripletResult:
    loss: Tensor
    d_p: np.ndarray
    d_n: np.ndarray
    margin: float
    per_anchor: np.ndarray = field(repr=False)


def batch_hard_triplet(features: Tensor, labels, margin: float) -> TripletResult:
    """Hardest positive / hardest negative per anchor on raw Euclidean distances."""
    labels = np.asarray(labels)
    B = labels.shape[0]
    values, counts = np.unique(labels, return_counts=True)
    lonely = values[counts < 2]
    if lonely.size:
        raise ContractError(f"label {lonely[0]} has a single sample in the batch; triplet mining needs >= 2")
    if values.size < 2:
        raise ContractError("batch contains a single identity; no negatives to mine")
    dist = pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    pos_idx = np.argmax(np.where(pos_mask, dist.data, -np.inf), axis=1)
    neg_idx = np.argmin(np.where(same, np.inf, dist.data), axis=1)
    rows = np.arange(B)
    d_p = dist[rows, pos_idx]
    d_n = dist[rows, neg_idx]
    per_anchor = T.relu(T.add_scalar(d_p - d_n, margin))
    return TripletResult(T.mean(per_anchor), d_p.data, d_n.data, margin, per_anchor.data)


def total_loss(l_id, l_tri, alpha1: float = 0.25, alpha2: float = 1.0):
    if alpha1 < 0 or alpha2 < 0:
        raise ParameterError("loss weights must be non-negative")
    return alpha1 * l_id + alpha2 * l_tri


@dataclass
class LossReport:
    l_id: float
    l_tri: float
    total: float
    alpha1: float
    alpha2: float
    margin: float
    d_p: np.ndarray = field(repr=False)
    d_n: np.ndarray = field(repr=False)
