"""Simulated multi-speaker mixtures with controllable overlap.

Each speaker's timeline alternates exponentially distributed silences
(mean ``beta`` seconds) and log-normal utterances; the timelines are then
overlaid, so overlap arises naturally and shrinks as ``beta`` grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from .annotation import Annotation
from .exceptions import SimulationError
from .features import (
    FRAME_SHIFT,
    SAMPLE_RATE,
    FeatureChunk,
    SyntheticSpeakerSpec,
    chunk_recording,
    read_wav,
    stft_features,
    synthetic_features,
    write_wav,
)
from .io import ManifestEntry, write_manifest, write_rttm
from .scoring import OverlapStats, corpus_overlap_stats

WavPool = Mapping[str, Sequence[str]]


@dataclass
class SimulationSpec:
    inventory: Union[SyntheticSpeakerSpec, WavPool]
    num_speakers: int = 2
    beta: float = 2.0
    utterances_per_speaker: int = 10
    utt_median: float = 2.0
    utt_sigma: float = 0.4
    num_mixtures: int = 10
    seed: int = 0
    frame_shift: float = FRAME_SHIFT / SAMPLE_RATE
    dev_mixtures: int = 0
    dev_speaker_fraction: float = 0.2

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")

    @property
    def speakers(self) -> list[str]:
        if isinstance(self.inventory, SyntheticSpeakerSpec):
            return self.inventory.speakers
        return sorted(self.inventory)


@dataclass
class Mixture:
    annotation: Annotation
    features: FeatureChunk
    samples: np.ndarray | None = None
    gaps: dict[str, list[float]] = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return self.features.frames * self.features.frame_shift_s


def _speaker_timeline(rng, spec: SimulationSpec, lengths: Sequence[float] | None):
    """(start, end) utterance spans and the silence gaps preceding them."""
    n = spec.utterances_per_speaker if lengths is None else len(lengths)
    spans, gaps = [], []
    t = 0.0
    for i in range(n):
        gap = float(rng.exponential(spec.beta))
        if lengths is None:
            length = float(rng.lognormal(math.log(spec.utt_median), spec.utt_sigma))
        else:
            length = float(lengths[i])
        t += gap
        spans.append((t, t + length))
        gaps.append(gap)
        t += length
    return spans, gaps


def simulate_mixture(
    spec: SimulationSpec,
    index: int = 0,
    speakers: Sequence[str] | None = None,
    recording_id: str | None = None,
) -> Mixture:
    """Generate mixture ``index`` of the corpus; deterministic in (spec.seed, index)."""
    pool = list(speakers) if speakers is not None else spec.speakers
    if not pool:
        raise SimulationError("speaker inventory is empty")
    if len(pool) < spec.num_speakers:
        raise SimulationError(f"need {spec.num_speakers} speakers, inventory has {len(pool)}")
    rng = np.random.default_rng([spec.seed, index])
    chosen = [pool[i] for i in sorted(rng.choice(len(pool), spec.num_speakers, replace=False))]
    rec = recording_id or f"mix{index:06d}"
    ann = Annotation(rec)
    gaps: dict[str, list[float]] = {}
    wav_mode = not isinstance(spec.inventory, SyntheticSpeakerSpec)
    placed: list[tuple[float, np.ndarray]] = []

    for spk in chosen:
        if wav_mode:
            files = list(spec.inventory[spk])
            if len(files) < spec.utterances_per_speaker:
                raise SimulationError(
                    f"speaker {spk}: {len(files)} utterances, need {spec.utterances_per_speaker}"
                )
            picks = rng.choice(len(files), spec.utterances_per_speaker, replace=False)
            audio = [read_wav(files[i])[0] for i in picks]
            spans, gaps[spk] = _speaker_timeline(rng, spec, [len(a) / SAMPLE_RATE for a in audio])
            placed.extend((s, a) for (s, _), a in zip(spans, audio))
        else:
            spans, gaps[spk] = _speaker_timeline(rng, spec, None)
        for s, e in spans:
            ann.add(spk, s, e)

    ann.turns.sort(key=lambda t: (t.start, t.speaker))
    duration = ann.end_time()
    feat_seed = int(rng.integers(2**31))
    if wav_mode:
        samples = np.zeros(int(math.ceil(duration * SAMPLE_RATE)) + 1)
        for start, audio in placed:
            off = int(round(start * SAMPLE_RATE))
            samples[off : off + len(audio)] += audio[: len(samples) - off]
        feats = stft_features(samples, recording_id=rec)
        return Mixture(ann, feats, samples, gaps)
    frames = int(math.ceil(duration / spec.frame_shift))
    feats = synthetic_features(spec.inventory.subset(chosen), ann, frames, feat_seed, spec.frame_shift)
    return Mixture(ann, feats, None, gaps)


def split_speakers(spec: SimulationSpec) -> tuple[list[str], list[str]]:
    """Disjoint (train, dev) speaker lists."""
    names = spec.speakers
    if spec.dev_mixtures <= 0:
        return names, []
    n_dev = max(spec.num_speakers, int(round(spec.dev_speaker_fraction * len(names))))
    if len(names) - n_dev < spec.num_speakers:
        raise SimulationError("inventory too small for a speaker-disjoint train/dev split")
    rng = np.random.default_rng([spec.seed, 0xDE7])
    order = rng.permutation(len(names))
    dev = sorted(names[i] for i in order[:n_dev])
    train = sorted(names[i] for i in order[n_dev:])
    return train, dev


def mixture_chunks(mixture: Mixture, chunk_frames: int, hop_frames: int | None = None):
    """(FeatureChunk, Annotation) pairs covering a mixture.

    Each chunk becomes a standalone recording: its id gets the start frame
    as suffix, and both features and turns are re-based to time zero.
    """
    out = []
    shift = mixture.features.frame_shift_s
    for chunk in chunk_recording(mixture.features, chunk_frames, hop_frames):
        start = chunk.start_frame * shift
        ann = mixture.annotation.crop(start, start + chunk.valid_frames * shift)
        ann.recording_id = f"{mixture.annotation.recording_id}-{chunk.start_frame:07d}"
        chunk.recording_id = ann.recording_id
        chunk.start_frame = 0
        out.append((chunk, ann))
    return out


@dataclass
class Corpus:
    train: list[ManifestEntry]
    dev: list[ManifestEntry]
    train_stats: OverlapStats
    dev_stats: OverlapStats | None
    train_speakers: list[str]
    dev_speakers: list[str]


def build_corpus(spec: SimulationSpec, out_dir, overwrite: bool = False) -> Corpus:
    """Write features (.npy), per-mixture RTTM, manifests and overlap statistics."""
    out = Path(out_dir)
    if (out / "train.tsv").exists() and not overwrite:
        raise SimulationError(f"{out} already holds a corpus")
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "rttm").mkdir(parents=True, exist_ok=True)
    train_spk, dev_spk = split_speakers(spec)

    def emit(split, n, speakers, offset):
        entries, anns = [], []
        for i in range(n):
            rec = f"{split}{i:06d}"
            mix = simulate_mixture(spec, offset + i, speakers, rec)
            feat_path = out / "features" / f"{rec}.npy"
            rttm_path = out / "rttm" / f"{rec}.rttm"
            np.save(feat_path, mix.features.matrix)
            write_rttm(mix.annotation, rttm_path)
            entries.append(ManifestEntry(rec, str(feat_path), str(rttm_path), mix.duration))
            anns.append(mix.annotation)
        return entries, anns

    train, train_anns = emit("train", spec.num_mixtures, train_spk, 0)
    write_manifest(train, out / "train.tsv")
    stats_lines = [_stats_line("train", corpus_overlap_stats(train_anns))]
    dev, dev_stats = [], None
    if spec.dev_mixtures > 0:
        dev, dev_anns = emit("dev", spec.dev_mixtures, dev_spk, 1_000_000)
        write_manifest(dev, out / "dev.tsv")
        dev_stats = corpus_overlap_stats(dev_anns)
        stats_lines.append(_stats_line("dev", dev_stats))
    (out / "stats.txt").write_text("\n".join(stats_lines) + "\n", encoding="utf-8")
    return Corpus(train, dev, corpus_overlap_stats(train_anns), dev_stats, train_spk, dev_spk)


def _stats_line(name: str, s: OverlapStats) -> str:
    return (
        f"{name} t_spk_ge1={s.t_spk_ge1:.3f} t_spk_ge2={s.t_spk_ge2:.3f}"
        f" overlap_ratio={100 * s.overlap_ratio:.2f}"
    )
