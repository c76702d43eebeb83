"""Feature extraction, cosine ranking and CMC/mAP under the cross-camera protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import no_grad

logger = logging.getLogger(__name__)


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (count, d)
    ids: np.ndarray
    cams: np.ndarray

    def __post_init__(self):
        if not (len(self.features) == len(self.ids) == len(self.cams)):
            raise DimensionError("feature rows and metadata lengths differ")


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray
    ap: np.ndarray  # per evaluated query
    valid_gallery: np.ndarray  # ranked entries per query after filtering
    num_queries: int
    num_skipped: int
    max_rank: int
    warnings: list[str] = field(default_factory=list)

    @property
    def rank1(self) -> float:
        return float(self.cmc[0]) if len(self.cmc) else 0.0

    def to_text(self) -> str:
        lines = [
            f"mAP={self.mAP:.6f}",
            f"Rank-1={self.rank1:.6f}",
            f"queries={self.num_queries}",
            f"skipped={self.num_skipped}",
            f"max_rank={self.max_rank}",
        ]
        lines.append("cmc," + ",".join(f"{v:.6f}" for v in self.cmc))
        return "\n".join(lines) + "\n"


def extract_features(model, images: np.ndarray, ids, cams, batch_size: int = 128) -> FeatureMatrix:
    """Run the whole pipeline without augmentation; rows keep input order."""
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            chunks.append(model(images[sl], np.asarray(cams)[sl]).data)
    feats = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.cfg.dim))
    return FeatureMatrix(feats, np.asarray(ids), np.asarray(cams))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def similarity(queries, gallery) -> np.ndarray:
    q = queries.features if isinstance(queries, FeatureMatrix) else np.asarray(queries, dtype=np.float64)
    g = gallery.features if isinstance(gallery, FeatureMatrix) else np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise DimensionError(f"query width {q.shape[1]} != gallery width {g.shape[1]}")
    return l2_normalize(q) @ l2_normalize(g).T


def cmc_map(S: np.ndarray, q_ids, q_cams, g_ids, g_cams, max_rank: int = 10) -> EvalReport:
    S = np.asarray(S, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if S.shape != (len(q_ids), len(g_ids)) or len(q_ids) != len(q_cams) or len(g_ids) != len(g_cams):
        raise DimensionError(f"similarity {S.shape} inconsistent with {len(q_ids)} queries / {len(g_ids)} gallery")
    aps, hits, valid_counts, notes = [], [], [], []
    skipped = 0
    for qi in range(len(q_ids)):
        order = np.argsort(-S[qi], kind="stable")
        keep = ~((g_ids[order] == q_ids[qi]) & (g_cams[order] == q_cams[qi]))
        order = order[keep]
        relevant = g_ids[order] == q_ids[qi]
        valid_counts.append(len(order))
        if not relevant.any():
            skipped += 1
            notes.append(f"query {qi} (id {q_ids[qi]}) has no cross-camera match; skipped")
            continue
        positions = np.flatnonzero(relevant) + 1
        aps.append(float(np.mean(np.arange(1, len(positions) + 1) / positions)))
        hits.append(positions[0])
    for note in notes:
        logger.warning(note)
    first_hit = np.asarray(hits)
    if len(first_hit):
        cmc = np.array([np.mean(first_hit <= r) for r in range(1, max_rank + 1)])
        mAP = float(np.mean(aps))
    else:
        cmc = np.zeros(max_rank)
        mAP = 0.0
    return EvalReport(mAP, cmc, np.asarray(aps), np.asarray(valid_counts), len(q_ids), skipped, max_rank, notes)


def evaluate(model, query, gallery, max_rank: int = 10) -> EvalReport:
    """``query``/``gallery`` are (images, ids, cams) triples."""
    qf = extract_features(model, *query)
    gf = extract_features(model, *gallery)
    return cmc_map(similarity(qf, gf), qf.ids, qf.cams, gf.ids, gf.cams, max_rank)
