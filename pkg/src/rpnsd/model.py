"""Joint segment-proposal and speaker-embedding network.

A strided convolutional backbone maps a (freq_bins, frames) chunk to a
(C, F, T) feature map.  The RPN scores and refines ``T * len(anchor_sizes)``
anchors; the best proposals are pooled with RoIAlign and passed through two
fully connected layers whose output is the speaker embedding.  From the
embedding, three heads predict the fg probability, a boundary refinement
and the training-speaker posterior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import losses
from . import tensor as T
from .anchors import (
    FG,
    ANCHOR_SIZES,
    AnchorGrid,
    assign_targets,
    build_anchor_grid,
    sample_minibatch,
)
from .annotation import Annotation
from .exceptions import ConfigError, NonFiniteError, ShapeError
from .features import FeatureChunk
from .losses import LossBreakdown
from .proposals import (
    DW_CLIP,
    ProposalSet,
    clip_intervals,
    decode_deltas,
    encode_deltas,
    select_proposals,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    freq_bins: int = 257
    chunk_frames: int = 1000
    backbone_channels: tuple[int, ...] = (8, 16, 32, 64)
    freq_strides: tuple[int, ...] = (2, 2, 2, 2)
    time_strides: tuple[int, ...] = (2, 2, 2, 2)
    context_layers: int = 2
    context_kernel: int = 7
    rpn_channels: int = 64
    anchor_sizes: tuple[int, ...] = ANCHOR_SIZES
    roi_bins: int = 7
    hidden_dim: int = 256
    embedding_dim: int = 128
    num_speakers: int = 2
    alpha: float = losses.ALPHA_TRAIN
    rpn_batch: int = 128
    rcnn_batch: int = 64
    fg_fraction: float = 0.5
    fg_threshold: float = 0.7
    bg_threshold: float = 0.3
    pre_nms_top_n: int = 300
    rpn_nms_threshold: float = 0.7
    train_post_nms_top_n: int = 100
    eval_post_nms_top_n: int = 50
    add_gt_proposals: bool = True
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay_steps: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    seed: int = 0

    def __post_init__(self):
        n = len(self.backbone_channels)
        if len(self.freq_strides) != n or len(self.time_strides) != n:
            raise ConfigError("backbone_channels, freq_strides and time_strides must have equal length")
        if self.embedding_dim < 1 or self.num_speakers < 1:
            raise ConfigError("embedding_dim and num_speakers must be positive")

    @property
    def frames_per_step(self) -> int:
        return int(np.prod(self.time_strides))

    def map_shape(self) -> tuple[int, int, int]:
        """(C, F, T) of the backbone output for a (freq_bins, chunk_frames) input."""
        f, t = self.freq_bins, self.chunk_frames
        for sf, st in zip(self.freq_strides, self.time_strides):
            f = (f + 2 - 3) // sf + 1
            t = (t + 2 - 3) // st + 1
        return self.backbone_channels[-1], f, t

    @property
    def timesteps(self) -> int:
        return self.map_shape()[2]


def full_config(**overrides) -> ModelConfig:
    """Full-size geometry: 257 bins, 1000 frames, 63 steps of 16 frames, 567 anchors."""
    return replace(ModelConfig(), **overrides)


def desk_config(**overrides) -> ModelConfig:
    """Small geometry for synthetic 16-dim features.

    512-frame chunks, 8 frames per step, nine anchor sizes up to the chunk length.
    """
    base = ModelConfig(
        freq_bins=16,
        chunk_frames=512,
        backbone_channels=(8, 16, 32, 64),
        freq_strides=(2, 2, 2, 1),
        time_strides=(2, 2, 2, 1),
        context_layers=2,
        context_kernel=7,
        rpn_channels=64,
        anchor_sizes=(1, 2, 4, 8, 16, 24, 32, 48, 64),
        roi_bins=4,
        hidden_dim=256,
        embedding_dim=128,
    )
    return replace(base, **overrides)


def micro_config(**overrides) -> ModelConfig:
    """A few hundred parameters; used for exhaustive gradient checks."""
    base = ModelConfig(
        freq_bins=8,
        chunk_frames=64,
        backbone_channels=(2, 3),
        freq_strides=(2, 2),
        time_strides=(2, 2),
        context_layers=1,
        context_kernel=3,
        rpn_channels=4,
        anchor_sizes=(1, 2, 4),
        roi_bins=2,
        hidden_dim=8,
        embedding_dim=6,
        num_speakers=3,
        rpn_batch=16,
        rcnn_batch=8,
        pre_nms_top_n=30,
        train_post_nms_top_n=10,
        eval_post_nms_top_n=6,
    )
    return replace(base, **overrides)


@dataclass
class LossPlan:
    """Discrete training decisions for one chunk, reusable to make the loss smooth in
    the parameters (gradient checks)."""

    rpn_index: np.ndarray
    rpn_labels: np.ndarray
    rpn_fg: np.ndarray
    rpn_targets: np.ndarray
    rois: np.ndarray
    rcnn_labels: np.ndarray
    rcnn_fg: np.ndarray
    rcnn_targets: np.ndarray
    speaker_labels: np.ndarray


def _init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    p: dict[str, np.ndarray] = {}
    c_in = 1
    for i, c in enumerate(cfg.backbone_channels):
        p[f"backbone.{i}.weight"] = he((c, c_in, 3, 3), c_in * 9)
        p[f"backbone.{i}.bias"] = np.zeros(c)
        c_in = c
    k = cfg.context_kernel
    for i in range(cfg.context_layers):
        p[f"context.{i}.weight"] = he((c_in, c_in, 1, k), c_in * k) * 0.5
        p[f"context.{i}.bias"] = np.zeros(c_in)
    a = len(cfg.anchor_sizes)
    p["rpn.conv.weight"] = he((cfg.rpn_channels, c_in, 3, 3), c_in * 9)
    p["rpn.conv.bias"] = np.zeros(cfg.rpn_channels)
    p["rpn.cls.weight"] = rng.normal(0.0, 0.01, size=(a, cfg.rpn_channels))
    p["rpn.cls.bias"] = np.zeros(a)
    p["rpn.reg.weight"] = rng.normal(0.0, 0.01, size=(2 * a, cfg.rpn_channels))
    p["rpn.reg.bias"] = np.zeros(2 * a)
    pooled = c_in * cfg.roi_bins * cfg.roi_bins
    p["fc.hidden.weight"] = he((cfg.hidden_dim, pooled), pooled)
    p["fc.hidden.bias"] = np.zeros(cfg.hidden_dim)
    p["fc.embed.weight"] = he((cfg.embedding_dim, cfg.hidden_dim), cfg.hidden_dim)
    p["fc.embed.bias"] = np.zeros(cfg.embedding_dim)
    p["head.cls.weight"] = rng.normal(0.0, 0.01, size=(1, cfg.embedding_dim))
    p["head.cls.bias"] = np.zeros(1)
    p["head.reg.weight"] = rng.normal(0.0, 0.001, size=(2, cfg.embedding_dim))
    p["head.reg.bias"] = np.zeros(2)
    p.update(_speaker_head(cfg, rng))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _speaker_head(cfg: ModelConfig, rng) -> dict[str, np.ndarray]:
    return {
        "head.spk.weight": rng.normal(0.0, 0.01, size=(cfg.num_speakers, cfg.embedding_dim)),
        "head.spk.bias": np.zeros(cfg.num_speakers),
    }


class RPNSDNet:
    """Parameters plus forward computation for one chunk at a time."""

    def __init__(self, config: ModelConfig, speakers: Sequence[str] | None = None):
        self.config = config
        self.speakers = list(speakers) if speakers is not None else [f"s{i}" for i in range(config.num_speakers)]
        if len(self.speakers) != config.num_speakers:
            raise ConfigError("speaker list length differs from num_speakers")
        c, f, t = config.map_shape()
        if f < 1 or t < 1:
            raise ConfigError(f"backbone reduces the input to an empty map ({c}, {f}, {t})")
        self.anchors: AnchorGrid = build_anchor_grid(t, config.anchor_sizes, config.frames_per_step)
        self.params = _init_params(config, np.random.default_rng([config.seed, 1]))

    @property
    def speaker_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.speakers)}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def reset_speaker_head(self, speakers: Sequence[str], seed: int) -> None:
        self.config = replace(self.config, num_speakers=len(speakers))
        self.speakers = list(speakers)
        for k, v in _speaker_head(self.config, np.random.default_rng([seed, 2])).items():
            self.params[k] = Tensor(v, requires_grad=True, name=k)

    # forward pieces -----------------------------------------------------------

    def _check_input(self, chunk) -> np.ndarray:
        x = chunk.matrix if isinstance(chunk, FeatureChunk) else np.asarray(chunk, dtype=np.float64)
        expected = (self.config.freq_bins, self.config.chunk_frames)
        if x.shape != expected:
            raise ConfigError(f"chunk shape {x.shape} does not match model geometry {expected}")
        return x

    def feature_map(self, x: np.ndarray) -> Tensor:
        p, cfg = self.params, self.config
        h = Tensor(x[None])
        for i, (sf, st) in enumerate(zip(cfg.freq_strides, cfg.time_strides)):
            h = T.relu(T.conv2d(h, p[f"backbone.{i}.weight"], p[f"backbone.{i}.bias"], (sf, st), 1))
        pad = (0, cfg.context_kernel // 2)
        for i in range(cfg.context_layers):
            h = h + T.relu(T.conv2d(h, p[f"context.{i}.weight"], p[f"context.{i}.bias"], 1, pad))
        return h

    def rpn(self, fmap: Tensor) -> tuple[Tensor, Tensor]:
        """Per-anchor fg logits (N,) and deltas (N, 2), timestep-major order."""
        p = self.params
        h = T.relu(T.conv2d(fmap, p["rpn.conv.weight"], p["rpn.conv.bias"], 1, 1))
        h = T.mean_pool(h, axis=1).transpose(1, 0)
        logits = T.linear(h, p["rpn.cls.weight"], p["rpn.cls.bias"]).reshape(-1)
        deltas = T.linear(h, p["rpn.reg.weight"], p["rpn.reg.bias"]).reshape(-1, 2)
        return logits, deltas

    def second_stage(self, fmap: Tensor, rois: np.ndarray):
        """Heads for proposals given in frames: (fg prob, deltas, speaker probs, embedding)."""
        p = self.params
        pooled = T.roi_align(fmap, rois / self.config.frames_per_step, bins=self.config.roi_bins)
        flat = pooled.reshape(len(rois), -1)
        hidden = T.relu(T.linear(flat, p["fc.hidden.weight"], p["fc.hidden.bias"]))
        emb = T.relu(T.linear(hidden, p["fc.embed.weight"], p["fc.embed.bias"]))
        fg = T.sigmoid(T.linear(emb, p["head.cls.weight"], p["head.cls.bias"]).reshape(-1))
        deltas = T.linear(emb, p["head.reg.weight"], p["head.reg.bias"])
        spk = T.softmax(T.linear(emb, p["head.spk.weight"], p["head.spk.bias"]), axis=1)
        return fg, deltas, spk, emb

    def _proposals(self, logits: Tensor, deltas: Tensor, valid: float, top_n: int):
        boxes = decode_deltas(deltas.data, self.anchors.anchors, DW_CLIP)
        boxes, reasons = clip_intervals(boxes, 0.0, valid)
        ok = np.flatnonzero(reasons == "ok")
        scores = 1.0 / (1.0 + np.exp(-logits.data[ok]))
        cfg = self.config
        keep = select_proposals(boxes[ok], scores, cfg.pre_nms_top_n, cfg.rpn_nms_threshold, top_n)
        return boxes[ok][keep], scores[keep]

    def forward(self, chunk, mode: str = "eval") -> ProposalSet:
        """Decoded, clipped proposals with fg scores and embeddings (intervals in chunk frames)."""
        if mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")
        x = self._check_input(chunk)
        valid = float(chunk.valid_frames if isinstance(chunk, FeatureChunk) else x.shape[1])
        origin = float(chunk.start_frame) if isinstance(chunk, FeatureChunk) else 0.0
        top_n = self.config.train_post_nms_top_n if mode == "train" else self.config.eval_post_nms_top_n
        fmap = self.feature_map(x)
        logits, deltas = self.rpn(fmap)
        rois, _ = self._proposals(logits, deltas, valid, top_n)
        if len(rois) == 0:
            return ProposalSet(np.zeros((0, 2)), np.zeros(0), np.zeros((0, self.config.embedding_dim)), origin)
        fg, rdeltas, spk, emb = self.second_stage(fmap, rois)
        refined = decode_deltas(rdeltas.data, rois, DW_CLIP)
        refined, reasons = clip_intervals(refined, 0.0, valid)
        keep = reasons != "outside"
        return ProposalSet(
            refined[keep],
            fg.data[keep],
            emb.data[keep],
            origin,
            {"rois": rois[keep], "speaker_probs": spk.data[keep]},
        )

    # training --------------------------------------------------------------------

    def make_plan(self, fmap_logits, deltas, truth: np.ndarray, truth_spk: np.ndarray, valid: float, rng) -> LossPlan:
        cfg = self.config
        a = assign_targets(self.anchors, truth, truth_spk, cfg.fg_threshold, cfg.bg_threshold)
        rpn_idx = sample_minibatch(a, cfg.rpn_batch, cfg.fg_fraction, rng)
        rpn_labels = (a.labels[rpn_idx] == FG).astype(float)
        rpn_fg = rpn_idx[rpn_labels > 0]
        rpn_targets = (
            encode_deltas(truth[a.matched[rpn_fg]], self.anchors.anchors[rpn_fg])
            if len(rpn_fg)
            else np.zeros((0, 2))
        )
        rois, _ = self._proposals(fmap_logits, deltas, valid, cfg.train_post_nms_top_n)
        if cfg.add_gt_proposals and len(truth):
            rois = np.concatenate([rois, truth])
        b = assign_targets(rois, truth, truth_spk, cfg.fg_threshold, cfg.bg_threshold)
        rcnn_idx = sample_minibatch(b, cfg.rcnn_batch, cfg.fg_fraction, rng)
        rcnn_labels = (b.labels[rcnn_idx] == FG).astype(float)
        fg_pos = np.flatnonzero(rcnn_labels > 0)
        fg_rois = rcnn_idx[fg_pos]
        rcnn_targets = (
            encode_deltas(truth[b.matched[fg_rois]], rois[fg_rois]) if len(fg_rois) else np.zeros((0, 2))
        )
        return LossPlan(
            rpn_idx,
            rpn_labels,
            rpn_fg,
            rpn_targets,
            rois[rcnn_idx],
            rcnn_labels,
            fg_pos,
            rcnn_targets,
            b.speakers[fg_rois],
        )

    def compute_loss(
        self,
        chunk,
        annotation: Annotation,
        rng=None,
        plan: LossPlan | None = None,
        alpha: float | None = None,
    ) -> tuple[LossBreakdown, LossPlan]:
        """Five-term loss for one chunk; ``annotation`` is chunk-relative, in seconds."""
        cfg = self.config
        x = self._check_input(chunk)
        shift = chunk.frame_shift_s if isinstance(chunk, FeatureChunk) else 0.01
        valid = float(chunk.valid_frames if isinstance(chunk, FeatureChunk) else x.shape[1])
        truth, names = annotation.to_frames(shift)
        index = self.speaker_index
        unknown = {n for n in names if n not in index}
        if unknown:
            raise ConfigError(f"speakers not in the model inventory: {sorted(unknown)}")
        truth_spk = np.array([index[n] for n in names], dtype=int)

        fmap = self.feature_map(x)
        logits, deltas = self.rpn(fmap)
        if plan is None:
            rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            plan = self.make_plan(logits, deltas, truth, truth_spk, valid, rng)

        parts = LossBreakdown(alpha=cfg.alpha if alpha is None else alpha)
        n_rpn = max(len(plan.rpn_index), 1)
        if len(plan.rpn_index):
            probs = T.sigmoid(logits[plan.rpn_index])
            parts.rpn_cls = losses.binary_cls_loss(probs, plan.rpn_labels, n_rpn)
        if len(plan.rpn_fg):
            parts.rpn_reg = losses.smooth_l1_loss(deltas[plan.rpn_fg], plan.rpn_targets, n_rpn)
        if len(plan.rois):
            fg, rdeltas, spk, _ = self.second_stage(fmap, plan.rois)
            n_rcnn = len(plan.rois)
            parts.rcnn_cls = losses.binary_cls_loss(fg, plan.rcnn_labels, n_rcnn)
            if len(plan.rcnn_fg):
                parts.rcnn_reg = losses.smooth_l1_loss(rdeltas[plan.rcnn_fg], plan.rcnn_targets, n_rcnn)
                parts.spk_cls = losses.speaker_cls_loss(spk[plan.rcnn_fg], plan.speaker_labels)
        return parts, plan


@dataclass
class SGDMomentum:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``p -= lr * v``; lr decays stepwise."""

    lr: float = 0.01
    momentum: float = 0.9
    decay_steps: tuple[int, ...] = ()
    decay_factor: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    step_count: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "SGDMomentum":
        return cls(cfg.lr, cfg.momentum, cfg.lr_decay_steps, cfg.lr_decay_factor, cfg.weight_decay, cfg.grad_clip)

    def current_lr(self) -> float:
        n = sum(1 for s in self.decay_steps if self.step_count >= s)
        return self.lr * self.decay_factor**n

    def step(self, params: dict[str, Tensor]) -> None:
        lr = self.current_lr()
        scale = 1.0
        if self.grad_clip > 0:
            norm = np.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = p.data - lr * v
        self.step_count += 1


def train_step(
    model: RPNSDNet,
    batch: Sequence[tuple[FeatureChunk, Annotation]],
    optimizer: SGDMomentum,
    seed: int | None = None,
    alpha: float | None = None,
) -> dict[str, float]:
    """One update on a batch; chunks are processed in order and gradients summed,
    each chunk's loss weighted by 1/len(batch).  Returns the mean breakdown."""
    if not batch:
        raise ValueError("empty batch")
    seed = model.config.seed if seed is None else seed
    rng = np.random.default_rng([seed, optimizer.step_count])
    model.zero_grad()
    totals: dict[str, float] = {}
    for chunk, ann in batch:
        try:
            parts, _ = model.compute_loss(chunk, ann, rng, alpha=alpha)
            loss = parts.total
            values = parts.values()
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite value during loss computation on {ann.recording_id}: {exc}") from exc
        bad = [k for k, v in values.items() if not np.isfinite(v)]
        if bad:
            raise NonFiniteError(f"non-finite loss terms {bad}: {values}")
        if isinstance(loss, Tensor):
            (loss * (1.0 / len(batch))).backward()
        for k, v in values.items():
            totals[k] = totals.get(k, 0.0) + v / len(batch)
    optimizer.step(model.params)
    totals["lr"] = optimizer.current_lr()
    return totals
