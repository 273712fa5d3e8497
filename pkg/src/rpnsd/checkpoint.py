"""Binary checkpoints: config text, parameter blobs and optimizer state.

Layout (all integers little-endian)::

    MAGIC                      8 bytes
    version                    u32
    config text                u64 length + UTF-8, key-sorted ``key = value`` lines
    state text                 u64 length + UTF-8 (step, seed, speakers)
    blob count                 u32
    per blob: name (u16 length + UTF-8), ndim (u8), shape (u64 * ndim),
              data (float64 LE, C order)
    END marker                 4 bytes
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import dump_config, load_config
from .exceptions import CheckpointError, ConfigError
from .model import ModelConfig, RPNSDNet, SGDMomentum
from .tensor import Tensor

MAGIC = b"RPNSDCK\x00"
VERSION = 1
END = b"END\x00"

# fields that fix parameter shapes; a checkpoint only fits a model agreeing on all of them
GEOMETRY_FIELDS = (
    "freq_bins",
    "chunk_frames",
    "backbone_channels",
    "freq_strides",
    "time_strides",
    "context_layers",
    "context_kernel",
    "rpn_channels",
    "anchor_sizes",
    "roi_bins",
    "hidden_dim",
    "embedding_dim",
)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    speakers: list[str] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: RPNSDNet, optimizer: SGDMomentum | None = None) -> "Checkpoint":
        return cls(
            model.config,
            {k: v.data.copy() for k, v in model.params.items()},
            {k: v.copy() for k, v in optimizer.velocity.items()} if optimizer else {},
            optimizer.step_count if optimizer else 0,
            model.config.seed,
            list(model.speakers),
        )

    def build_model(self) -> RPNSDNet:
        model = RPNSDNet(self.config, self.speakers)
        restore(model, self)
        return model

    def build_optimizer(self) -> SGDMomentum:
        opt = SGDMomentum.from_config(self.config)
        opt.step_count = self.step
        opt.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return opt


def check_geometry(expected: ModelConfig, found: ModelConfig) -> None:
    diff = [f for f in GEOMETRY_FIELDS if getattr(expected, f) != getattr(found, f)]
    if diff:
        detail = ", ".join(f"{f}: {getattr(found, f)} != {getattr(expected, f)}" for f in diff)
        raise ConfigError(f"checkpoint geometry does not match the model ({detail})")


def restore(model: RPNSDNet, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into ``model`` (geometry must agree)."""
    check_geometry(model.config, ckpt.config)
    if set(model.params) != set(ckpt.params):
        raise CheckpointError("parameter names differ between checkpoint and model")
    for name, value in ckpt.params.items():
        if model.params[name].shape != value.shape:
            raise ConfigError(f"{name}: shape {value.shape} != {model.params[name].shape}")
        model.params[name] = Tensor(value.copy(), requires_grad=True, name=name)


def _state_text(ckpt: Checkpoint) -> str:
    lines = [f"step = {ckpt.step}", f"seed = {ckpt.seed}"]
    lines += [f"speaker = {s}" for s in ckpt.speakers]
    return "".join(line + "\n" for line in lines)


def _write_blob(buf, name: str, value: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(value, dtype="<f8")
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for text in (dump_config(ckpt.config), _state_text(ckpt)):
        raw = text.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)) + raw)
    blobs = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    blobs += [(f"velocity/{k}", v) for k, v in sorted(ckpt.velocity.items())]
    buf.write(struct.pack("<I", len(blobs)))
    for name, value in blobs:
        _write_blob(buf, name, value)
    buf.write(END)
    return buf.getvalue()


def save_checkpoint(path, model_or_ckpt, optimizer: SGDMomentum | None = None) -> Path:
    """Write atomically: a temporary file in the target directory is renamed into place."""
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt, optimizer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    texts = []
    for _ in range(2):
        (n,) = r.unpack("<Q")
        texts.append(r.take(n).decode("utf-8"))
    try:
        config = load_config(ModelConfig, texts[0])
    except (ConfigError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: unreadable config ({exc})") from exc
    step, seed, speakers = 0, 0, []
    for line in texts[1].splitlines():
        key, _, value = line.partition(" = ")
        if key == "step":
            step = int(value)
        elif key == "seed":
            seed = int(value)
        elif key == "speaker":
            speakers.append(value)
    (count,) = r.unpack("<I")
    params, velocity = {}, {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, key = name.partition("/")
        (params if kind == "param" else velocity)[key] = arr
    if r.take(len(END)) != END:
        raise CheckpointError(f"{source}: missing end marker")
    return Checkpoint(config, params, velocity, step, seed, speakers)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected`` the geometry must match it."""
    ckpt = from_bytes(Path(path).read_bytes(), str(path))
    if expected is not None:
        check_geometry(expected, ckpt.config)
    return ckpt
