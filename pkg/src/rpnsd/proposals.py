"""Segment coordinate encoding, NMS, proposal filtering and RoIAlign."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .anchors import iou_matrix
from .annotation import Interval
from .tensor import Tensor, roi_align as _roi_align

# Largest log length ratio applied when decoding network outputs.
DW_CLIP = float(np.log(1000.0 / 16.0))

TRAIN_POST_NMS_TOP_N = 100
EVAL_POST_NMS_TOP_N = 50


class CoordDelta(NamedTuple):
    dx: float
    dw: float


@dataclass(frozen=True)
class RoiAlignConfig:
    bins_per_axis: int = 7
    samples_per_bin: int = 4

    def __post_init__(self):
        if self.bins_per_axis < 1:
            raise ValueError("bins_per_axis must be >= 1")
        if self.samples_per_bin != 4:
            raise ValueError("samples_per_bin must be 4 (a 2x2 grid)")


@dataclass
class ProposalSet:
    intervals: np.ndarray
    scores: np.ndarray
    embeddings: np.ndarray | None = None
    chunk_origin: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.intervals = np.asarray(self.intervals, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.intervals) != len(self.scores):
            raise ValueError("intervals and scores differ in length")
        if self.embeddings is not None and len(self.embeddings) != len(self.scores):
            raise ValueError("embeddings and scores differ in length")

    def __len__(self) -> int:
        return len(self.scores)

    def subset(self, index) -> "ProposalSet":
        index = np.asarray(index, dtype=int)
        emb = None if self.embeddings is None else self.embeddings[index]
        return ProposalSet(
            self.intervals[index],
            self.scores[index],
            emb,
            self.chunk_origin,
            {k: v[index] for k, v in self.extra.items()},
        )


def encode(segment: Interval, reference: Interval) -> CoordDelta:
    dx, dw = encode_deltas(np.array([segment]), np.array([reference]))[0]
    return CoordDelta(float(dx), float(dw))


def encode_deltas(segments: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Row-wise ``[(x - x_a) / w_a, log(w / w_a)]`` for center x and length w."""
    seg = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    ref = np.asarray(references, dtype=np.float64).reshape(-1, 2)
    w_a = ref[:, 1] - ref[:, 0]
    x_a = 0.5 * (ref[:, 0] + ref[:, 1])
    w = seg[:, 1] - seg[:, 0]
    x = 0.5 * (seg[:, 0] + seg[:, 1])
    return np.stack([(x - x_a) / w_a, np.log(w / w_a)], axis=1)


def decode_deltas(deltas: np.ndarray, references: np.ndarray, max_dw: float | None = None) -> np.ndarray:
    """Inverse of :func:`encode_deltas` (no clipping to any bounds)."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 2)
    ref = np.asarray(references, dtype=np.float64).reshape(-1, 2)
    w_a = ref[:, 1] - ref[:, 0]
    x_a = 0.5 * (ref[:, 0] + ref[:, 1])
    dw = d[:, 1] if max_dw is None else np.minimum(d[:, 1], max_dw)
    x = d[:, 0] * w_a + x_a
    w = np.exp(dw) * w_a
    return np.stack([x - 0.5 * w, x + 0.5 * w], axis=1)


def clip_intervals(intervals: np.ndarray, lo: float, hi: float, min_length: float = 1.0):
    """Clip to ``[lo, hi]``.

    Returns the clipped array and a reason code per row: ``"ok"``,
    ``"outside"`` (no overlap with the bounds; should be dropped) or
    ``"degenerate"`` (clipped length <= ``min_length``).
    """
    iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    clipped = np.clip(iv, lo, hi)
    reasons = np.full(len(iv), "ok", dtype=object)
    reasons[clipped[:, 1] - clipped[:, 0] <= min_length] = "degenerate"
    reasons[(iv[:, 1] <= lo) | (iv[:, 0] >= hi)] = "outside"
    return clipped, reasons


def decode(delta: CoordDelta, reference: Interval, clip_to: Interval | None = None):
    """Decode one delta; returns ``(interval or None, reason)``."""
    seg = decode_deltas(np.array([delta]), np.array([reference]))
    if clip_to is None:
        return Interval(float(seg[0, 0]), float(seg[0, 1])), "ok"
    clipped, reasons = clip_intervals(seg, clip_to[0], clip_to[1])
    if reasons[0] == "outside":
        return None, "outside"
    return Interval(float(clipped[0, 0]), float(clipped[0, 1])), reasons[0]


def nms(proposals, iou_threshold: float, scores: np.ndarray | None = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    ``proposals`` is a :class:`ProposalSet` or an (n, 2) interval array with
    ``scores`` given separately.  Returns kept indices by descending score;
    equal scores are visited in index order.
    """
    if isinstance(proposals, ProposalSet):
        boxes, scores = proposals.intervals, proposals.scores
    else:
        boxes = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
        scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlaps[i] > iou_threshold
    return np.asarray(keep, dtype=int)


def select_proposals(
    intervals: np.ndarray,
    scores: np.ndarray,
    pre_nms_top_n: int = 300,
    nms_threshold: float = 0.7,
    post_nms_top_n: int = EVAL_POST_NMS_TOP_N,
) -> np.ndarray:
    """Indices surviving rank truncation, NMS and the final top-n cut."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:pre_nms_top_n]
    if len(order) == 0:
        return order
    kept = nms(np.asarray(intervals)[order], nms_threshold, scores[order])
    return order[kept][:post_nms_top_n]


def filter_proposals(
    proposals: ProposalSet,
    pre_nms_top_n: int = 300,
    nms_threshold: float = 0.7,
    post_nms_top_n: int = EVAL_POST_NMS_TOP_N,
) -> ProposalSet:
    idx = select_proposals(
        proposals.intervals, proposals.scores, pre_nms_top_n, nms_threshold, post_nms_top_n
    )
    return proposals.subset(idx)


def roi_align(feature_map: Tensor, rois, cfg: RoiAlignConfig = RoiAlignConfig()) -> Tensor:
    """RoIAlign over time spans given in feature-map timestep units."""
    return _roi_align(feature_map, np.asarray(rois, dtype=np.float64), bins=cfg.bins_per_axis, samples=2)
