"""RTTM and manifest reading/writing."""

from __future__ import annotations

import os
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Iterable, Mapping

from .annotation import Annotation, Turn, canonicalize
from .exceptions import DataError

__all__ = [
    "ManifestEntry",
    "canonicalize",
    "format_seconds",
    "read_manifest",
    "read_rttm",
    "write_manifest",
    "write_rttm",
]

_MS = Decimal("0.001")


def format_seconds(value: float) -> str:
    """Three decimals, round-half-even on the shortest decimal repr of ``value``."""
    return str(Decimal(repr(float(value))).quantize(_MS, rounding=ROUND_HALF_EVEN))


def read_rttm(path) -> dict[str, Annotation]:
    """Parse SPEAKER lines into one Annotation per file id; other line types are skipped."""
    out: dict[str, Annotation] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields or fields[0] != "SPEAKER":
                continue
            if len(fields) < 8:
                raise DataError(f"{path}:{lineno}: expected at least 8 fields, got {len(fields)}")
            try:
                onset, dur = float(fields[3]), float(fields[4])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad onset/duration") from exc
            if dur < 0:
                raise DataError(f"{path}:{lineno}: negative duration {dur}")
            if onset < 0:
                raise DataError(f"{path}:{lineno}: negative onset {onset}")
            rec = fields[1]
            ann = out.setdefault(rec, Annotation(rec))
            if dur > 0:
                ann.turns.append(Turn(fields[7], onset, onset + dur))
    return out


def rttm_lines(annotations: Iterable[Annotation]) -> list[str]:
    rows = []
    for ann in annotations:
        for t in ann.turns:
            if " " in t.speaker or " " in ann.recording_id:
                raise DataError("RTTM fields may not contain whitespace")
            rows.append((ann.recording_id, t.start, t.speaker, t.end))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return [
        f"SPEAKER {rec} 1 {format_seconds(s)} {format_seconds(e - s)} <NA> <NA> {spk} <NA> <NA>"
        for rec, s, spk, e in rows
    ]


def write_rttm(annotations, path) -> None:
    if isinstance(annotations, Annotation):
        annotations = [annotations]
    elif isinstance(annotations, Mapping):
        annotations = list(annotations.values())
    lines = rttm_lines(canonicalize(a) for a in annotations)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


@dataclass(frozen=True)
class ManifestEntry:
    recording_id: str
    feature_path: str
    rttm_path: str
    duration: float


def read_manifest(path) -> list[ManifestEntry]:
    """Tab-separated ``id, feature path, RTTM path, duration``; relative paths resolve
    against the manifest's directory."""
    base = Path(path).parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
            rec, feat, rttm, dur = parts
            try:
                duration = float(dur)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad duration {dur!r}") from exc
            entries.append(
                ManifestEntry(rec, str(base / feat) if feat else "", str(base / rttm) if rttm else "", duration)
            )
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    base = Path(path).parent
    lines = []
    for e in entries:
        feat = os.path.relpath(e.feature_path, base) if e.feature_path else ""
        rttm = os.path.relpath(e.rttm_path, base) if e.rttm_path else ""
        lines.append(f"{e.recording_id}\t{feat}\t{rttm}\t{format_seconds(e.duration)}\n")
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")
