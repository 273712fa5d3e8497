"""Training objective: two fg/bg cross-entropies, two smooth-L1 boundary
regressions and a speaker cross-entropy weighted by ``alpha``."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7
ALPHA_TRAIN = 1.0
ALPHA_ADAPT = 0.1


def binary_cls_loss(p: Tensor, p_star, normalizer: float | None = None) -> Tensor:
    """Mean of ``-(p* log p + (1 - p*) log(1 - p))``.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` inside the loss only.
    """
    target = np.asarray(p_star, dtype=np.float64).reshape(p.shape)
    pc = T.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    per = T.mul(T.log(pc), Tensor(target)) + T.mul(T.log(1.0 - pc), Tensor(1.0 - target))
    n = normalizer if normalizer is not None else max(p.size, 1)
    return per.sum() * (-1.0 / n)


def smooth_l1_loss(t: Tensor, t_star, normalizer: float | None = None) -> Tensor:
    """Sum over rows and both coordinates of smooth-L1(t - t*), divided by ``normalizer``."""
    diff = t - Tensor(np.asarray(t_star, dtype=np.float64).reshape(t.shape))
    n = normalizer if normalizer is not None else max(t.shape[0] if t.ndim else 1, 1)
    return T.smooth_l1(diff).sum() * (1.0 / n)


def speaker_cls_loss(s: Tensor, labels, normalizer: float | None = None) -> Tensor:
    """Mean of ``-<s*, log s>`` for rows of probabilities ``s`` and integer labels."""
    labels = np.asarray(labels, dtype=int).reshape(-1)
    probs = s if s.ndim == 2 else s.reshape(1, -1)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    logs = T.log(T.clip(probs, PROB_EPS, 1.0))
    n = normalizer if normalizer is not None else max(len(labels), 1)
    return T.mul(logs, Tensor(onehot)).sum() * (-1.0 / n)


@dataclass
class LossBreakdown:
    rpn_cls: float | Tensor = 0.0
    rpn_reg: float | Tensor = 0.0
    rcnn_cls: float | Tensor = 0.0
    rcnn_reg: float | Tensor = 0.0
    spk_cls: float | Tensor = 0.0
    alpha: float = ALPHA_TRAIN

    TERMS = ("rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "spk_cls")

    @property
    def total(self):
        return total_loss(self)

    def values(self) -> dict[str, float]:
        """Plain floats for logging."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.data) if isinstance(v, Tensor) else float(v)
        t = self.total
        out["total"] = float(t.data) if isinstance(t, Tensor) else float(t)
        return out


def total_loss(parts: LossBreakdown, alpha: float | None = None):
    a = parts.alpha if alpha is None else alpha
    return parts.rpn_cls + parts.rpn_reg + parts.rcnn_cls + parts.rcnn_reg + parts.spk_cls * a
