"""Recording-level inference: chunk, run the network, post-process."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .annotation import Annotation
from .features import FeatureChunk, chunk_recording
from .model import RPNSDNet
from .pipeline import PostprocessConfig, postprocess
from .proposals import ProposalSet


def predict_chunks(model: RPNSDNet, features: FeatureChunk) -> list[ProposalSet]:
    """Eval-mode predictions on non-overlapping chunks; ``chunk_origin`` set per chunk."""
    chunks = chunk_recording(features, model.config.chunk_frames)
    return [model.forward(c, mode="eval") for c in chunks]


def diarize(
    model: RPNSDNet,
    features: FeatureChunk,
    cfg: PostprocessConfig | None = None,
) -> Annotation:
    preds = predict_chunks(model, features)
    return postprocess(preds, cfg, features.frame_shift_s, features.recording_id)


def diarize_many(
    model: RPNSDNet,
    recordings: Sequence[FeatureChunk],
    cfgs: Sequence[PostprocessConfig],
    jobs: int = 1,
) -> list[Annotation]:
    """Diarize recordings, optionally on a thread pool; output order follows input order."""
    if jobs <= 1:
        return [diarize(model, r, c) for r, c in zip(recordings, cfgs)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda rc: diarize(model, *rc), zip(recordings, cfgs)))


def as_feature_chunk(x, frame_shift: float = 0.01, recording_id: str = "") -> FeatureChunk:
    if isinstance(x, FeatureChunk):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a (freq_bins, frames) matrix, got shape {arr.shape}")
    return FeatureChunk(arr, frame_shift, recording_id)
