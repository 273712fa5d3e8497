"""Post-processing of segment proposals into a diarization hypothesis.

Three steps turn a recording's proposal pool into speaker turns: drop
proposals whose fg probability is below ``gamma``, cluster the remaining
embeddings with K-means, then run NMS among proposals of the same cluster.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .annotation import Annotation, canonicalize
from .proposals import ProposalSet, nms

GAMMA = 0.5
POST_NMS_THRESHOLD = 0.3


@dataclass
class PostprocessConfig:
    gamma: float = GAMMA
    nms_threshold: float = POST_NMS_THRESHOLD
    num_speakers: Union[int, str] = 2
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 100
    seed: int = 0
    k_max: int = 8
    elbow_factor: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ValueError("nms_threshold must lie in [0, 1]")
        if isinstance(self.num_speakers, str) and self.num_speakers != "auto":
            self.num_speakers = int(self.num_speakers)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    wcss: float
    history: list[float]


def _wcss(x: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> float:
    return float(((x - centers[labels]) ** 2).sum())


def _farthest_point_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    idx = [int(rng.integers(len(x)))]
    d = ((x - x[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[idx].copy()


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> KMeansResult:
    history = []
    labels = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)
        history.append(_wcss(x, new_labels, centers))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(len(centers)):
            members = x[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    history.append(_wcss(x, labels, centers))
    return KMeansResult(labels, centers, history[-1], history)


def kmeans_fit(x, k: int, restarts: int = 10, max_iter: int = 100, seed=0) -> KMeansResult:
    """Lloyd's algorithm from farthest-point seeds; best of ``restarts`` by WCSS."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("kmeans needs a nonempty (n, d) matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    distinct = len(np.unique(x, axis=0))
    if k > distinct:
        warnings.warn(f"k={k} exceeds {distinct} distinct points; using k={distinct}")
        k = distinct
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        res = _lloyd(x, _farthest_point_init(x, k, rng), max_iter)
        if best is None or res.wcss < best.wcss:
            best = res
    return best


def kmeans(x, k: int, restarts: int = 10, max_iter: int = 100, seed=0) -> np.ndarray:
    return kmeans_fit(x, k, restarts, max_iter, seed).labels


def estimate_num_speakers(x, k_max: int = 8, factor: float = 0.5, seed=0) -> int:
    """Smallest k after which one more cluster removes less than ``1 - factor`` of the WCSS.

    A convenience for unknown speaker counts; evaluation normally uses the
    oracle count.
    """
    x = np.asarray(x, dtype=np.float64)
    k_max = min(k_max, len(np.unique(x, axis=0)))
    prev = None
    for k in range(1, k_max + 1):
        w = kmeans_fit(x, k, restarts=3, seed=seed).wcss
        if prev is not None and (prev <= 0 or w > factor * prev):
            return k - 1
        if w <= 1e-12 * max(1.0, float((x**2).sum())):
            return k
        prev = w
    return k_max


def pool_proposals(predictions: Sequence[ProposalSet]) -> ProposalSet:
    """Concatenate chunk-level proposals in recording frames (offset by chunk origin)."""
    if not predictions:
        return ProposalSet(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 0)))
    iv = np.concatenate([p.intervals + p.chunk_origin for p in predictions])
    sc = np.concatenate([p.scores for p in predictions])
    embs = [p.embeddings for p in predictions if p.embeddings is not None and len(p.embeddings)]
    dim = embs[0].shape[1] if embs else 0
    em = np.concatenate([p.embeddings if p.embeddings is not None else np.zeros((0, dim)) for p in predictions])
    return ProposalSet(iv, sc, em.reshape(len(sc), dim))


def cluster_and_suppress(pool: ProposalSet, cfg: PostprocessConfig):
    """Apply the score threshold, cluster, then per-cluster NMS.

    Returns (surviving indices into ``pool``, cluster label per survivor,
    kept indices into ``pool``).
    """
    survivors = np.flatnonzero(pool.scores >= cfg.gamma)
    if len(survivors) == 0:
        return survivors, np.zeros(0, dtype=int), survivors
    emb = pool.embeddings[survivors]
    if cfg.num_speakers == "auto":
        k = estimate_num_speakers(emb, cfg.k_max, cfg.elbow_factor, cfg.seed) if len(emb) > 1 else 1
    else:
        k = int(cfg.num_speakers)
    if k > len(survivors):
        warnings.warn(f"{k} speakers requested but only {len(survivors)} proposals survive")
        k = len(survivors)
    labels = kmeans(emb, k, cfg.kmeans_restarts, cfg.kmeans_max_iter, cfg.seed)
    kept = []
    for c in np.unique(labels):
        members = survivors[labels == c]
        kept.extend(members[nms(pool.intervals[members], cfg.nms_threshold, pool.scores[members])])
    return survivors, labels, np.asarray(sorted(kept), dtype=int)


def postprocess(
    predictions: Sequence[ProposalSet],
    cfg: PostprocessConfig | None = None,
    frame_shift: float = 0.01,
    recording_id: str = "",
) -> Annotation:
    """Recording-level hypothesis from chunk predictions (intervals in frames)."""
    cfg = cfg or PostprocessConfig()
    pool = pool_proposals(predictions)
    survivors, labels, kept = cluster_and_suppress(pool, cfg)
    label_of = dict(zip(survivors.tolist(), labels.tolist()))
    ann = Annotation(recording_id)
    for i in kept:
        s, e = pool.intervals[i] * frame_shift
        ann.add(f"spk{label_of[int(i)]}", max(0.0, s), e)
    return canonicalize(ann)
