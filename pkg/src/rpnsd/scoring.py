"""Frame-level diarization error rate, optimal speaker mapping, overlap statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .annotation import Annotation, canonicalize
from .exceptions import ScoringError

STANDARD_COLLARS = (0.0, 0.1, 0.25)


@dataclass(frozen=True)
class ScoringConfig:
    collar_s: float = 0.0
    score_overlap: bool = True
    frame_step_s: float = 0.001

    def __post_init__(self):
        if self.collar_s < 0:
            raise ValueError("collar must be >= 0")
        if self.frame_step_s <= 0:
            raise ValueError("frame_step must be > 0")
        ratio = self.collar_s / self.frame_step_s
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError("frame_step must divide the collar")


@dataclass
class DerReport:
    """Error components as fractions of scored reference speaker time."""

    der: float
    miss: float
    false_alarm: float
    confusion: float
    sad_miss: float
    sad_false_alarm: float
    scored_time: float
    recording_id: str = ""

    def as_percent(self) -> dict[str, float]:
        keys = ("der", "miss", "false_alarm", "confusion", "sad_miss", "sad_false_alarm")
        return {k: 100.0 * getattr(self, k) for k in keys}


@dataclass
class OverlapStats:
    t_spk_ge1: float
    t_spk_ge2: float

    @property
    def overlap_ratio(self) -> float:
        return self.t_spk_ge2 / self.t_spk_ge1 if self.t_spk_ge1 > 0 else 0.0


def _activity(ann: Annotation, n_frames: int, step: float) -> tuple[np.ndarray, list[str]]:
    """Boolean (speakers, frames) matrix; a frame is active if its centre is inside a turn."""
    speakers = ann.speakers
    act = np.zeros((len(speakers), n_frames), dtype=bool)
    row = {s: i for i, s in enumerate(speakers)}
    for t in ann.turns:
        lo = max(0, int(np.ceil(t.start / step - 0.5)))
        hi = min(n_frames, int(np.ceil(t.end / step - 0.5)))
        if hi > lo:
            act[row[t.speaker], lo:hi] = True
    return act, speakers


def _scored_mask(ref: Annotation, ref_act: np.ndarray, n_frames: int, cfg: ScoringConfig) -> np.ndarray:
    mask = np.ones(n_frames, dtype=bool)
    if cfg.collar_s > 0:
        step = cfg.frame_step_s
        for t in ref.turns:
            for b in (t.start, t.end):
                lo = max(0, int(np.ceil((b - cfg.collar_s) / step - 0.5)))
                hi = min(n_frames, int(np.ceil((b + cfg.collar_s) / step - 0.5)))
                mask[lo:hi] = False
    if not cfg.score_overlap:
        mask &= ref_act.sum(axis=0) < 2
    return mask


def _assign(overlap: np.ndarray) -> dict[int, int]:
    """Maximum-weight one-to-one matching hyp row -> ref column, positive weights only."""
    if overlap.size == 0:
        return {}
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols) if overlap[r, c] > 0}


def optimal_speaker_map(
    reference: Annotation, hypothesis: Annotation, cfg: ScoringConfig | None = None
) -> dict[str, str]:
    """Hypothesis speaker -> reference speaker maximising co-active time."""
    cfg = cfg or ScoringConfig()
    ref, hyp = canonicalize(reference), canonicalize(hypothesis)
    n = int(np.ceil(max(ref.end_time(), hyp.end_time()) / cfg.frame_step_s)) + 1
    ref_act, ref_spk = _activity(ref, n, cfg.frame_step_s)
    hyp_act, hyp_spk = _activity(hyp, n, cfg.frame_step_s)
    mask = _scored_mask(ref, ref_act, n, cfg)
    overlap = (hyp_act[:, mask].astype(float) @ ref_act[:, mask].T.astype(float)) * cfg.frame_step_s
    return {hyp_spk[h]: ref_spk[r] for h, r in _assign(overlap).items()}


def der(reference: Annotation, hypothesis: Annotation, cfg: ScoringConfig | None = None) -> DerReport:
    """Diarization error rate at ``cfg.frame_step_s`` resolution.

    Per scored frame with N_ref reference and N_hyp hypothesis speakers:
    miss = max(0, N_ref - N_hyp), false alarm = max(0, N_hyp - N_ref),
    confusion = min(N_ref, N_hyp) - correctly mapped speakers.
    """
    cfg = cfg or ScoringConfig()
    step = cfg.frame_step_s
    ref, hyp = canonicalize(reference), canonicalize(hypothesis)
    n = int(np.ceil(max(ref.end_time(), hyp.end_time()) / step)) + 1
    ref_act, ref_spk = _activity(ref, n, step)
    hyp_act, hyp_spk = _activity(hyp, n, step)
    mask = _scored_mask(ref, ref_act, n, cfg)
    ref_act, hyp_act = ref_act[:, mask], hyp_act[:, mask]

    n_ref = ref_act.sum(axis=0)
    n_hyp = hyp_act.sum(axis=0)
    total = float(n_ref.sum())
    if total == 0:
        raise ScoringError(f"{reference.recording_id}: no reference speech left to score")

    overlap = hyp_act.astype(float) @ ref_act.T.astype(float)
    mapping = _assign(overlap)
    correct = np.zeros(ref_act.shape[1])
    for h, r in mapping.items():
        correct += hyp_act[h] & ref_act[r]

    miss = np.maximum(0, n_ref - n_hyp).sum()
    fa = np.maximum(0, n_hyp - n_ref).sum()
    conf = (np.minimum(n_ref, n_hyp) - correct).sum()
    sad_miss = ((n_ref > 0) & (n_hyp == 0)).sum()
    sad_fa = ((n_hyp > 0) & (n_ref == 0)).sum()
    return DerReport(
        der=(miss + fa + conf) / total,
        miss=miss / total,
        false_alarm=fa / total,
        confusion=conf / total,
        sad_miss=sad_miss / total,
        sad_false_alarm=sad_fa / total,
        scored_time=total * step,
        recording_id=reference.recording_id,
    )


def corpus_der(reports: list[DerReport]) -> DerReport:
    """Time-weighted aggregate of per-recording reports."""
    w = np.array([r.scored_time for r in reports], dtype=float)
    if not len(reports) or w.sum() == 0:
        raise ScoringError("no scored time in corpus")

    def avg(key):
        return float(np.dot(w, [getattr(r, key) for r in reports]) / w.sum())

    return DerReport(
        der=avg("der"),
        miss=avg("miss"),
        false_alarm=avg("false_alarm"),
        confusion=avg("confusion"),
        sad_miss=avg("sad_miss"),
        sad_false_alarm=avg("sad_false_alarm"),
        scored_time=float(w.sum()),
        recording_id="TOTAL",
    )


def overlap_stats(reference: Annotation) -> OverlapStats:
    """Exact time with >= 1 and >= 2 active speakers via an event sweep."""
    ann = canonicalize(reference)
    if not ann.turns:
        raise ScoringError("overlap statistics need nonempty speech")
    events = sorted([(t.start, 1) for t in ann.turns] + [(t.end, -1) for t in ann.turns])
    ge1 = ge2 = 0.0
    active = 0
    prev = events[0][0]
    for time, delta in events:
        span = time - prev
        if active >= 1:
            ge1 += span
        if active >= 2:
            ge2 += span
        active += delta
        prev = time
    return OverlapStats(ge1, ge2)


def corpus_overlap_stats(annotations) -> OverlapStats:
    stats = [overlap_stats(a) for a in annotations if a.turns]
    return OverlapStats(sum(s.t_spk_ge1 for s in stats), sum(s.t_spk_ge2 for s in stats))


def format_report(reports: list[DerReport], total: DerReport | None = None) -> str:
    """Aligned percent table (DER, MI, FA, CF, SAD MI/FA) followed by key=value lines."""
    rows = list(reports) + ([total] if total is not None else [])
    width = max([len("recording")] + [len(r.recording_id) for r in rows])
    head = f"{'recording':<{width}}  {'DER':>7}  {'MI':>7}  {'FA':>7}  {'CF':>7}  {'SAD_MI':>7}  {'SAD_FA':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        p = r.as_percent()
        lines.append(
            f"{r.recording_id:<{width}}  {p['der']:7.3f}  {p['miss']:7.3f}  {p['false_alarm']:7.3f}"
            f"  {p['confusion']:7.3f}  {p['sad_miss']:7.3f}  {p['sad_false_alarm']:7.3f}"
        )
    lines.append("")
    for r in rows:
        p = r.as_percent()
        kv = " ".join(f"{k}={v:.3f}" for k, v in p.items())
        lines.append(f"{r.recording_id} {kv} scored_time={r.scored_time:.3f}")
    return "\n".join(lines) + "\n"
