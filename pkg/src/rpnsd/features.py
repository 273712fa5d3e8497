"""STFT magnitude features, chunking, WAV I/O and synthetic speaker features."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotation import Annotation
from .exceptions import DataError

SAMPLE_RATE = 8000
FRAME_SIZE = 512
FRAME_SHIFT = 80
CHUNK_FRAMES = 1000


@dataclass
class FeatureChunk:
    """A (freq_bins, frames) feature matrix cut from one recording."""

    matrix: np.ndarray
    frame_shift_s: float = FRAME_SHIFT / SAMPLE_RATE
    recording_id: str = ""
    start_frame: int = 0
    valid_frames: int | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.valid_frames is None:
            self.valid_frames = self.matrix.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def frames(self) -> int:
        return self.matrix.shape[1]


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_features(
    samples: np.ndarray,
    sample_rate: int = SAMPLE_RATE,
    frame_size: int = FRAME_SIZE,
    frame_shift: int = FRAME_SHIFT,
    log_compress: bool = False,
    recording_id: str = "",
) -> FeatureChunk:
    """Magnitude STFT with a periodic Hann window.

    One frame starts every ``frame_shift`` samples from sample 0; the tail
    is zero-padded so the last frame is complete, giving
    ``ceil(len / frame_shift)`` frames.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if frame_shift < 1 or frame_size < frame_shift:
        raise ValueError("need 1 <= frame_shift <= frame_size")
    if len(x) < frame_size:
        raise DataError(f"audio has {len(x)} samples, shorter than one {frame_size}-sample frame")
    n_frames = math.ceil(len(x) / frame_shift)
    padded_len = (n_frames - 1) * frame_shift + frame_size
    x = np.pad(x, (0, padded_len - len(x)))
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_size)[::frame_shift][:n_frames]
    mag = np.abs(np.fft.rfft(frames * periodic_hann(frame_size), axis=1)).T
    if log_compress:
        mag = np.log1p(mag)
    return FeatureChunk(mag, frame_shift / sample_rate, recording_id)


def chunk_recording(
    features: FeatureChunk | np.ndarray,
    chunk_frames: int = CHUNK_FRAMES,
    hop_frames: int | None = None,
) -> list[FeatureChunk]:
    """Cut a recording into fixed-size chunks covering every frame.

    The last chunk is zero-padded; ``valid_frames`` records its real length.
    """
    if isinstance(features, FeatureChunk):
        matrix, shift, rec = features.matrix, features.frame_shift_s, features.recording_id
    else:
        matrix, shift, rec = np.asarray(features, dtype=np.float64), FRAME_SHIFT / SAMPLE_RATE, ""
    hop = hop_frames or chunk_frames
    total = matrix.shape[1]
    n_chunks = 1 if total <= chunk_frames else math.ceil((total - chunk_frames) / hop) + 1
    chunks = []
    for i in range(n_chunks):
        start = i * hop
        piece = matrix[:, start : start + chunk_frames]
        valid = piece.shape[1]
        if valid < chunk_frames:
            piece = np.pad(piece, ((0, 0), (0, chunk_frames - valid)))
        chunks.append(FeatureChunk(piece, shift, rec, start, valid))
    return chunks


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read mono 16-bit PCM at 8 kHz; returns samples scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    if channels != 1:
        raise DataError(
            f"{path}: {channels} channels; sum the channels to mono before feature extraction"
        )
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# synthetic speakers -----------------------------------------------------------


@dataclass
class SyntheticSpeakerSpec:
    """Isotropic Gaussian feature generators, one per speaker."""

    means: dict[str, np.ndarray]
    speaker_std: float = 0.3
    noise_floor: float = 0.05
    noise_std: float = 0.05
    dim: int = field(init=False)

    def __post_init__(self):
        self.means = {k: np.asarray(v, dtype=np.float64) for k, v in self.means.items()}
        dims = {len(v) for v in self.means.values()}
        if len(dims) > 1:
            raise ValueError("speaker means differ in dimension")
        self.dim = dims.pop() if dims else 0

    @property
    def speakers(self) -> list[str]:
        return list(self.means)

    def subset(self, names) -> "SyntheticSpeakerSpec":
        return SyntheticSpeakerSpec(
            {n: self.means[n] for n in names}, self.speaker_std, self.noise_floor, self.noise_std
        )


def make_speaker_inventory(
    n_speakers: int,
    dim: int = 16,
    separation: float = 2.0,
    seed: int = 0,
    prefix: str = "spk",
    speaker_std: float = 0.3,
) -> SyntheticSpeakerSpec:
    """Random speaker means with entries uniform in ``[0, separation]``."""
    rng = np.random.default_rng([seed, 0x5BEA])
    means = {f"{prefix}{i:03d}": rng.uniform(0.0, separation, size=dim) for i in range(n_speakers)}
    return SyntheticSpeakerSpec(means, speaker_std=speaker_std)


def activity_mask(annotation: Annotation, speaker: str, frames: int, frame_shift: float) -> np.ndarray:
    """Frames whose centre lies inside one of ``speaker``'s turns."""
    centers = (np.arange(frames) + 0.5) * frame_shift
    mask = np.zeros(frames, dtype=bool)
    for t in annotation.turns:
        if t.speaker == speaker:
            mask |= (centers >= t.start) & (centers < t.end)
    return mask


def synthetic_components(
    spec: SyntheticSpeakerSpec,
    annotation: Annotation,
    frames: int,
    seed: int,
    frame_shift: float = FRAME_SHIFT / SAMPLE_RATE,
) -> dict[str, np.ndarray]:
    """Per-source (dim, frames) contributions: ``"<noise>"`` plus one per speaker."""
    missing = set(annotation.speakers) - set(spec.means)
    if missing:
        raise ValueError(f"speakers not in the synthetic spec: {sorted(missing)}")
    names = list(spec.means)
    rng = np.random.default_rng([seed, 0])
    parts = {"<noise>": spec.noise_floor + spec.noise_std * rng.standard_normal((spec.dim, frames))}
    for spk in annotation.speakers:
        mask = activity_mask(annotation, spk, frames, frame_shift)
        srng = np.random.default_rng([seed, 1 + names.index(spk)])
        draw = spec.means[spk][:, None] + spec.speaker_std * srng.standard_normal((spec.dim, frames))
        parts[spk] = draw * mask[None, :]
    return parts


def synthetic_features(
    spec: SyntheticSpeakerSpec,
    annotation: Annotation,
    frames: int,
    seed: int,
    frame_shift: float = FRAME_SHIFT / SAMPLE_RATE,
) -> FeatureChunk:
    """Magnitude of noise floor plus the active speakers' Gaussian draws per frame."""
    parts = synthetic_components(spec, annotation, frames, seed, frame_shift)
    total = np.abs(sum(parts.values()))
    return FeatureChunk(total, frame_shift, annotation.recording_id)
