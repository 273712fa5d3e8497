"""1-D anchor grid, interval IoU and training-target assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .annotation import Interval

FG, BG, IGNORE = 1, 0, -1

ANCHOR_SIZES = (1, 2, 4, 8, 16, 24, 32, 48, 64)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors in frames, ordered timestep-major then size.

    ``anchors[t * len(sizes) + k]`` is centred at ``(t + 0.5) * frames_per_step``
    with length ``sizes[k] * frames_per_step``.
    """

    anchors: np.ndarray
    timesteps: int
    sizes: tuple[int, ...]
    frames_per_step: int

    def __len__(self) -> int:
        return len(self.anchors)

    def intervals(self) -> list[Interval]:
        return [Interval(float(s), float(e)) for s, e in self.anchors]


def build_anchor_grid(
    timesteps: int, sizes: Sequence[int] = ANCHOR_SIZES, frames_per_step: int = 16
) -> AnchorGrid:
    sizes = tuple(int(s) for s in sizes)
    if not sizes or min(sizes) <= 0:
        raise ValueError("anchor sizes must be a nonempty list of positive integers")
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    centers = (np.arange(timesteps) + 0.5) * frames_per_step
    half = 0.5 * np.asarray(sizes, dtype=np.float64) * frames_per_step
    starts = (centers[:, None] - half[None, :]).ravel()
    ends = (centers[:, None] + half[None, :]).ravel()
    return AnchorGrid(np.stack([starts, ends], axis=1), timesteps, sizes, frames_per_step)


def iou(a: Interval, b: Interval) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 2) and (m, 2) interval arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(
        np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0.0,
        None,
    )
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass
class TargetAssignment:
    labels: np.ndarray  # FG / BG / IGNORE per anchor
    matched: np.ndarray  # best-IoU truth index, -1 unless fg
    speakers: np.ndarray  # speaker id of the matched truth, -1 unless fg
    max_iou: np.ndarray

    @property
    def fg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == FG)

    @property
    def bg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == BG)


def assign_targets(
    candidates,
    truth: np.ndarray,
    truth_speakers: Sequence[int] | None = None,
    fg_threshold: float = 0.7,
    bg_threshold: float = 0.3,
    force_best: bool = True,
) -> TargetAssignment:
    """Label candidate intervals fg / bg / ignore against ground truth.

    fg when the best IoU exceeds ``fg_threshold``, bg when it is below
    ``bg_threshold``, ignore in between.  With ``force_best`` the
    highest-IoU candidate of every truth segment is also made fg.
    """
    boxes = candidates.anchors if isinstance(candidates, AnchorGrid) else np.asarray(candidates)
    boxes = boxes.reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    n = len(boxes)
    if len(truth) == 0:
        return TargetAssignment(
            np.full(n, BG), np.full(n, -1), np.full(n, -1), np.zeros(n)
        )
    if truth_speakers is None:
        truth_speakers = np.arange(len(truth))
    truth_speakers = np.asarray(truth_speakers)

    overlaps = iou_matrix(boxes, truth)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best]
    labels = np.full(n, IGNORE)
    labels[best_iou < bg_threshold] = BG
    labels[best_iou > fg_threshold] = FG
    if force_best and n:
        per_truth = overlaps.argmax(axis=0)
        hit = overlaps[per_truth, np.arange(len(truth))] > 0
        labels[per_truth[hit]] = FG
    fg = labels == FG
    matched = np.where(fg, best, -1)
    speakers = np.where(fg, truth_speakers[best], -1)
    return TargetAssignment(labels, matched, speakers, best_iou)


def sample_minibatch(
    assignment: TargetAssignment | np.ndarray,
    total: int,
    fg_fraction: float = 0.5,
    seed=None,
) -> np.ndarray:
    """Random fg/bg subset of at most ``total`` indices, never ``ignore``."""
    labels = assignment.labels if isinstance(assignment, TargetAssignment) else np.asarray(assignment)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fg = np.flatnonzero(labels == FG)
    bg = np.flatnonzero(labels == BG)
    n_fg = min(len(fg), int(fg_fraction * total))
    n_bg = min(len(bg), total - n_fg)
    fg_pick = rng.choice(fg, size=n_fg, replace=False) if n_fg else fg[:0]
    bg_pick = rng.choice(bg, size=n_bg, replace=False) if n_bg else bg[:0]
    return np.concatenate([np.sort(fg_pick), np.sort(bg_pick)]).astype(int)
