"""Intervals and speaker-turn annotations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np


class Interval(NamedTuple):
    """Half-open span ``[start, end)``; units are whatever the caller uses."""

    start: float
    end: float

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    @property
    def length(self) -> float:
        return self.end - self.start

    def is_valid(self) -> bool:
        return bool(np.isfinite(self.start) and np.isfinite(self.end) and self.end > self.start)


class Turn(NamedTuple):
    speaker: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Annotation:
    """Speaker turns of one recording, in seconds."""

    recording_id: str
    turns: list[Turn] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.turns)

    @property
    def speakers(self) -> list[str]:
        return sorted({t.speaker for t in self.turns})

    def add(self, speaker: str, start: float, end: float) -> None:
        self.turns.append(Turn(str(speaker), float(start), float(end)))

    def total_speech(self) -> float:
        """Speaker time (overlapping speakers counted separately)."""
        return float(sum(t.duration for t in self.turns))

    def end_time(self) -> float:
        return max((t.end for t in self.turns), default=0.0)

    def crop(self, start: float, end: float, shift: bool = True) -> "Annotation":
        """Turns restricted to ``[start, end)``, optionally re-based to ``start``."""
        out = Annotation(self.recording_id)
        offset = start if shift else 0.0
        for t in self.turns:
            s, e = max(t.start, start), min(t.end, end)
            if e > s:
                out.add(t.speaker, s - offset, e - offset)
        return out

    def to_frames(self, frame_shift: float) -> tuple[np.ndarray, list[str]]:
        """(n, 2) array of turn spans in frames plus the parallel speaker list."""
        spans = np.array([[t.start, t.end] for t in self.turns], dtype=np.float64).reshape(-1, 2)
        return spans / frame_shift, [t.speaker for t in self.turns]


def canonicalize(annotation: Annotation) -> Annotation:
    """Merge overlapping or touching same-speaker turns, drop empty ones, sort."""
    by_speaker: dict[str, list[tuple[float, float]]] = {}
    for t in annotation.turns:
        if t.end > t.start:
            by_speaker.setdefault(t.speaker, []).append((t.start, t.end))
    merged: list[Turn] = []
    for speaker, spans in by_speaker.items():
        spans.sort()
        cur_s, cur_e = spans[0]
        for s, e in spans[1:]:
            if s <= cur_e:
                cur_e = max(cur_e, e)
            else:
                merged.append(Turn(speaker, cur_s, cur_e))
                cur_s, cur_e = s, e
        merged.append(Turn(speaker, cur_s, cur_e))
    merged.sort(key=lambda t: (t.start, t.speaker, t.end))
    return Annotation(annotation.recording_id, merged)


def from_turns(recording_id: str, turns: Iterable[tuple[str, float, float]]) -> Annotation:
    ann = Annotation(recording_id)
    for spk, s, e in turns:
        ann.add(spk, s, e)
    return ann
