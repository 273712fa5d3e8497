"""Training loop, batch order and speaker adaptation."""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Callable, Sequence

import numpy as np

from .annotation import Annotation
from .checkpoint import Checkpoint
from .features import FeatureChunk
from .losses import ALPHA_ADAPT
from .model import RPNSDNet, SGDMomentum, train_step

logger = logging.getLogger(__name__)

ADAPT_LR = 4e-5

Example = tuple[FeatureChunk, Annotation]


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> list[int]:
    """Indices for ``step``: consecutive slices of per-epoch permutations.

    Depends only on (step, batch_size, n, seed), so a resumed run sees the
    same batches as an uninterrupted one.
    """
    out = []
    perms: dict[int, np.ndarray] = {}
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch = pos // n
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, 0xBA7C, epoch]).permutation(n)
        out.append(int(perms[epoch][pos % n]))
    return out


def format_log_line(step: int, values: dict[str, float]) -> str:
    keys = ("rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "spk_cls", "alpha", "total", "lr")
    return f"step={step} " + " ".join(f"{k}={values[k]:.6g}" for k in keys if k in values)


def train(
    model: RPNSDNet,
    data: Sequence[Example],
    steps: int,
    batch_size: int = 4,
    optimizer: SGDMomentum | None = None,
    seed: int | None = None,
    alpha: float | None = None,
    callback: Callable[[int, dict[str, float]], None] | None = None,
) -> tuple[SGDMomentum, list[dict[str, float]]]:
    """Run ``steps`` updates, continuing from ``optimizer.step_count`` if given."""
    if not data:
        raise ValueError("no training examples")
    optimizer = optimizer or SGDMomentum.from_config(model.config)
    seed = model.config.seed if seed is None else seed
    history = []
    for _ in range(steps):
        step = optimizer.step_count
        batch = [data[i] for i in batch_indices(step, min(batch_size, len(data)), len(data), seed)]
        values = train_step(model, batch, optimizer, seed, alpha)
        history.append(values)
        logger.debug(format_log_line(step + 1, values))
        if callback is not None:
            callback(step + 1, values)
    return optimizer, history


def adapt(
    source: RPNSDNet | Checkpoint,
    data: Sequence[Example],
    steps: int,
    speakers: Sequence[str] | None = None,
    lr: float = ADAPT_LR,
    alpha: float = ALPHA_ADAPT,
    batch_size: int = 4,
    seed: int | None = None,
    callback=None,
) -> tuple[RPNSDNet, SGDMomentum, list[dict[str, float]]]:
    """Fine-tune a trained model on new data.

    All weights are copied; the speaker head is re-initialized for the new
    speaker inventory (taken from ``data`` when ``speakers`` is None).
    Momentum restarts from zero and the learning rate stays constant.
    """
    base = source.build_model() if isinstance(source, Checkpoint) else _copy(source)
    if speakers is None:
        speakers = sorted({s for _, ann in data for s in ann.speakers})
    seed = base.config.seed if seed is None else seed
    base.reset_speaker_head(list(speakers), seed)
    base.config = replace(base.config, lr=lr, alpha=alpha, lr_decay_steps=())
    optimizer = SGDMomentum.from_config(base.config)
    if steps == 0:
        return base, optimizer, []
    optimizer, history = train(base, data, steps, batch_size, optimizer, seed, alpha, callback)
    return base, optimizer, history


def _copy(model: RPNSDNet) -> RPNSDNet:
    return Checkpoint.from_model(model).build_model()
