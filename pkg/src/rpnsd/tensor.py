"""Small dense tensor type with reverse-mode differentiation.

Only the operators the diarization network needs are provided: 2-D
convolution, affine maps, the usual pointwise nonlinearities, softmax,
mean pooling, a handful of elementwise arithmetic ops and 1-D RoIAlign.
Everything is float64.  Binary elementwise ops accept operands of equal
shape or a scalar; there is no general broadcasting.

A graph is built implicitly as ops run.  ``Tensor.backward`` visits the
recorded nodes in exact reverse creation order, so gradients accumulate
deterministically.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NonFiniteError, ShapeError

_node_ids = itertools.count()


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_node_ids)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        grads = {self._id: np.ones_like(self.data)}
        for node_id in sorted(nodes, reverse=True):
            node = nodes[node_id]
            g = grads.pop(node_id, None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return tensor_sum(self, axis) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(_check_finite(data, op))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        a, b = value
        return int(a), int(b)
    return int(value), int(value)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unlift(grad: np.ndarray, like: Tensor) -> np.ndarray:
    # scalar operand of an elementwise op: reduce the broadcast gradient
    if like.shape != grad.shape:
        return np.asarray(grad.sum()).reshape(like.shape)
    return grad


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (_unlift(g, a), _unlift(g, b)), "add")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unlift(g * b.data, a), _unlift(g * a.data, b)),
        "mul",
    )


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return _node(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _node(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),), "power")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*d**2 for |d| < 1, |d| - 0.5 otherwise.

    At |d| == 1 the derivative is taken from the linear branch (sign(d)).
    """
    d = x.data
    small = np.abs(d) < 1.0
    out = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    slope = np.where(small, d, np.sign(d))
    return _node(out, (x,), lambda g: (g * slope,), "smooth_l1")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


# shape & reduction -------------------------------------------------------------


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean_pool(x: Tensor, axis: int) -> Tensor:
    """Average over ``axis``, dropping it."""
    if x.shape[axis] == 0:
        raise ShapeError("mean_pool over an empty axis")
    return x.mean(axis=axis)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)
    return _node(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def take(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(x.data[index]), (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tensors, backward, "concat")


# learned maps -------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (n, in) or (in,)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data
        g2 = np.atleast_2d(g)
        gw = g2.T @ np.atleast_2d(x.data)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, backward, "linear")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
) -> Tensor:
    """Cross-correlate a (C_in, H, W) map with (C_out, C_in, kh, kw) kernels."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D input and 4-D weight, got {x.shape}, {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc, kh, kw = weight.shape
    if wc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, weight expects {wc}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :ho, :wo]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T).T.reshape(c_out, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(c_out, ho * wo)
        gw = (g2 @ cols).reshape(weight.shape)
        dcols = (g2.T @ wmat).reshape(ho, wo, c_in, kh, kw)
        gxp = np.zeros((c_in, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw] += dcols[:, :, :, i, j].transpose(
                    2, 0, 1
                )
        gx = gxp[:, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _node(out, parents, backward, "conv2d")


# RoIAlign -------------------------------------------------------------------------


def interp_weights(coords: np.ndarray, size: int) -> np.ndarray:
    """Linear-interpolation weights, shape (len(coords), size).

    Cell ``k`` is the sample site at continuous coordinate ``k + 0.5``;
    coordinates beyond the outer centres clamp to the edge cells.
    """
    p = np.clip(np.asarray(coords, dtype=np.float64) - 0.5, 0.0, size - 1)
    lo = np.floor(p).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = p - lo
    w = np.zeros((p.size, size))
    rows = np.arange(p.size)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def bin_sample_weights(start: float, length: float, bins: int, size: int, samples: int = 2) -> np.ndarray:
    """Average interpolation weights of ``samples`` evenly spaced points per bin.

    Returns (bins, size); row ``j`` applied to a 1-D signal yields the
    mean of the signal at the sample points of bin ``j``.
    """
    width = length / bins
    offsets = (np.arange(samples) + 0.5) / samples
    coords = start + (np.arange(bins)[:, None] + offsets[None, :]) * width
    w = interp_weights(coords.ravel(), size)
    return w.reshape(bins, samples, size).mean(axis=1)


def roi_align(feature_map: Tensor, rois: np.ndarray, bins: int = 7, samples: int = 2) -> Tensor:
    """Pool time spans of a (C, F, T) map into (R, C, bins, bins).

    ``rois`` is (R, 2) of [start, end) on the map's time axis in cell
    units; every RoI covers the whole frequency extent.  Each bin averages
    ``samples x samples`` bilinearly interpolated points.  The 2-D bilinear
    weights factor into frequency and time parts, which is what makes the
    einsum formulation (and its transpose for backward) exact.
    """
    if feature_map.ndim != 3:
        raise ShapeError(f"roi_align expects a (C, F, T) map, got {feature_map.shape}")
    rois = np.atleast_2d(np.asarray(rois, dtype=np.float64))
    lengths = rois[:, 1] - rois[:, 0]
    if np.any(lengths <= 0):
        raise ShapeError("roi_align: RoI with non-positive length")
    _, f, t = feature_map.shape
    wf = bin_sample_weights(0.0, float(f), bins, f, samples)
    wt = np.stack([bin_sample_weights(s, ln, bins, t, samples) for s, ln in zip(rois[:, 0], lengths)])
    out = np.einsum("if,cft,rjt->rcij", wf, feature_map.data, wt, optimize=True)

    def backward(g):
        return (np.einsum("if,rcij,rjt->cft", wf, g, wt, optimize=True),)

    return _node(out, (feature_map,), backward, "roi_align")


# verification ------------------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Non-smooth points (relu at 0, the smooth-L1 kink at |d| == 1) must be
    avoided by the caller.
    """
    x0 = _as_array(x)
    probe = Tensor(x0.copy(), requires_grad=True)
    fn(probe).backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn(Tensor(x0)).data)
        flat[i] = orig - eps
        down = float(fn(Tensor(x0)).data)
        flat[i] = orig
        num_flat[i] = (up - down) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
