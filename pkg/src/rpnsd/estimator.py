"""scikit-learn style wrappers around the diarization network and K-means."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .annotation import Annotation
from .features import FeatureChunk, chunk_recording
from .inference import as_feature_chunk, diarize
from .model import ModelConfig, RPNSDNet, desk_config, micro_config, full_config
from .pipeline import GAMMA, POST_NMS_THRESHOLD, PostprocessConfig, kmeans_fit
from .scoring import ScoringConfig, corpus_der, der
from .training import train

PRESETS = {"full": full_config, "desk": desk_config, "micro": micro_config}


class SpeakerKMeans(ClusterMixin, BaseEstimator):
    """K-means with farthest-point seeding and restarts."""

    def __init__(self, n_clusters: int = 2, n_init: int = 10, max_iter: int = 100, random_state: int = 0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        res = kmeans_fit(X, self.n_clusters, self.n_init, self.max_iter, self.random_state)
        self.labels_ = res.labels
        self.cluster_centers_ = res.centers
        self.inertia_ = res.wcss
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        d = ((X[:, None, :] - self.cluster_centers_[None]) ** 2).sum(axis=2)
        return d.argmin(axis=1)


def _as_recordings(X, frame_shift: float) -> list[FeatureChunk]:
    if isinstance(X, (FeatureChunk, np.ndarray)) and np.ndim(getattr(X, "matrix", X)) == 2:
        X = [X]
    out = []
    for i, x in enumerate(X):
        rec = as_feature_chunk(x, frame_shift, f"rec{i:05d}")
        if not rec.recording_id:
            rec = FeatureChunk(rec.matrix, rec.frame_shift_s, f"rec{i:05d}")
        if not np.all(np.isfinite(rec.matrix)):
            raise ValueError(f"recording {i} contains non-finite features")
        out.append(rec)
    return out


class RPNSDiarizer(BaseEstimator):
    """Region-proposal diarizer: ``fit`` on (features, annotation) pairs, ``predict`` RTTM-ready
    annotations.

    ``X`` is a sequence of (freq_bins, frames) matrices or FeatureChunks;
    ``y`` the matching Annotations in seconds relative to each matrix.
    Recordings longer than the chunk size are cut into chunks for training.
    """

    def __init__(
        self,
        preset: str = "desk",
        steps: int = 1000,
        batch_size: int = 4,
        learning_rate: float = 0.01,
        lr_decay_at: tuple = (0.7, 0.9),
        alpha: float = 1.0,
        num_speakers="auto",
        gamma: float = GAMMA,
        nms_threshold: float = POST_NMS_THRESHOLD,
        frame_shift: float = 0.01,
        random_state: int = 0,
    ):
        self.preset = preset
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_at = lr_decay_at
        self.alpha = alpha
        self.num_speakers = num_speakers
        self.gamma = gamma
        self.nms_threshold = nms_threshold
        self.frame_shift = frame_shift
        self.random_state = random_state

    def _config(self, freq_bins: int, n_speakers: int) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {sorted(PRESETS)}")
        decay = tuple(int(round(f * self.steps)) for f in self.lr_decay_at)
        return PRESETS[self.preset](
            freq_bins=freq_bins,
            num_speakers=n_speakers,
            lr=self.learning_rate,
            lr_decay_steps=decay,
            alpha=self.alpha,
            seed=self.random_state,
        )

    def fit(self, X, y: Sequence[Annotation]):
        recs = _as_recordings(X, self.frame_shift)
        y = list(y)
        if len(recs) != len(y):
            raise ValueError(f"{len(recs)} recordings but {len(y)} annotations")
        bins = {r.shape[0] for r in recs}
        if len(bins) != 1:
            raise ValueError(f"recordings disagree on frequency bins: {sorted(bins)}")
        speakers = sorted({s for a in y for s in a.speakers})
        if not speakers:
            raise ValueError("annotations contain no speech")
        cfg = self._config(bins.pop(), len(speakers))
        data = []
        for rec, ann in zip(recs, y):
            for chunk in chunk_recording(rec, cfg.chunk_frames):
                start = chunk.start_frame * rec.frame_shift_s
                piece = ann.crop(start, start + chunk.valid_frames * rec.frame_shift_s)
                chunk.start_frame = 0
                data.append((chunk, piece))
        self.model_ = RPNSDNet(cfg, speakers)
        self.optimizer_, history = train(self.model_, data, self.steps, self.batch_size, seed=self.random_state)
        self.loss_history_ = [h["total"] for h in history]
        self.speakers_ = speakers
        self.n_features_in_ = cfg.freq_bins
        return self

    def _post_cfg(self, k) -> PostprocessConfig:
        return PostprocessConfig(self.gamma, self.nms_threshold, k, seed=self.random_state)

    def predict(self, X, num_speakers=None) -> list[Annotation]:
        """One Annotation per recording; ``num_speakers`` may be a per-recording list."""
        check_is_fitted(self, "model_")
        recs = _as_recordings(X, self.frame_shift)
        k = self.num_speakers if num_speakers is None else num_speakers
        ks = list(k) if isinstance(k, (list, tuple)) else [k] * len(recs)
        out = []
        for rec, ki in zip(recs, ks):
            if rec.shape[0] != self.n_features_in_:
                raise ValueError(f"expected {self.n_features_in_} frequency bins, got {rec.shape[0]}")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                out.append(diarize(self.model_, rec, self._post_cfg(ki)))
        return out

    def score(self, X, y: Sequence[Annotation], collar: float = 0.0) -> float:
        """``1 - DER`` (overlap scored), with the oracle speaker count per recording."""
        y = list(y)
        hyps = self.predict(X, [max(1, len(a.speakers)) for a in y])
        cfg = ScoringConfig(collar_s=collar)
        reports = [der(ref, hyp, cfg) for ref, hyp in zip(y, hyps)]
        return 1.0 - corpus_der(reports).der
