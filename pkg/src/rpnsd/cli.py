"""Command-line entry point: simulate, train, adapt, infer, score, stats.

Exit status: 0 on success, 1 on usage errors, 2 on data errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .annotation import Annotation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_from_dict, dump_config, parse_kv
from .exceptions import ConfigError, RPNSDError
from .features import FeatureChunk, chunk_recording, make_speaker_inventory, read_wav, stft_features
from .inference import diarize_many
from .io import read_manifest, read_rttm, write_rttm
from .model import ModelConfig, RPNSDNet, desk_config, micro_config, full_config
from .pipeline import GAMMA, POST_NMS_THRESHOLD, PostprocessConfig
from .scoring import STANDARD_COLLARS, ScoringConfig, corpus_der, corpus_overlap_stats, der, format_report
from .simulate import SimulationSpec, build_corpus
from .training import adapt, format_log_line, train

JOBS_ENV = "RPNSD_JOBS"
PRESETS = {"full": full_config, "desk": desk_config, "micro": micro_config}
log = logging.getLogger("rpnsd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclasses.dataclass
class TrainSettings:
    preset: str = "desk"
    steps: int = 1000
    batch_size: int = 4


# data loading ---------------------------------------------------------------------


def load_features(path: str, recording_id: str) -> FeatureChunk:
    if path.lower().endswith(".wav"):
        samples, _ = read_wav(path)
        return stft_features(samples, recording_id=recording_id)
    try:
        matrix = np.load(path)
    except (OSError, ValueError) as exc:
        raise RPNSDError(f"{path}: cannot read features ({exc})") from exc
    if matrix.ndim != 2:
        raise RPNSDError(f"{path}: expected a 2-D feature matrix, got shape {matrix.shape}")
    return FeatureChunk(matrix, recording_id=recording_id)


def load_reference(entry) -> Annotation:
    if not entry.rttm_path:
        raise RPNSDError(f"{entry.recording_id}: manifest has no RTTM path")
    return read_rttm(entry.rttm_path).get(entry.recording_id, Annotation(entry.recording_id))


def training_examples(manifest: str, chunk_frames: int):
    data = []
    for entry in read_manifest(manifest):
        rec = load_features(entry.feature_path, entry.recording_id)
        ann = load_reference(entry)
        for chunk in chunk_recording(rec, chunk_frames):
            start = chunk.start_frame * rec.frame_shift_s
            piece = ann.crop(start, start + chunk.valid_frames * rec.frame_shift_s)
            piece.recording_id = chunk.recording_id = f"{entry.recording_id}-{chunk.start_frame:07d}"
            chunk.start_frame = 0
            data.append((chunk, piece))
    if not data:
        raise RPNSDError(f"{manifest}: no recordings")
    return data


# config handling ----------------------------------------------------------------


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_training_config(args, freq_bins: int, speakers) -> tuple[TrainSettings, ModelConfig]:
    """Config file first, then explicit flags, then ``--set`` overrides."""
    values = parse_kv(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    for flag in ("preset", "steps", "batch_size", "seed"):
        if getattr(args, flag, None) is not None:
            values[flag] = str(getattr(args, flag))
    values.update(parse_overrides(args.set))
    train_keys = {f.name for f in dataclasses.fields(TrainSettings)}
    settings = config_from_dict(TrainSettings, {k: v for k, v in values.items() if k in train_keys})
    if settings.preset not in PRESETS:
        raise UsageError(f"unknown preset {settings.preset!r}; choose from {sorted(PRESETS)}")
    model_values = {k: v for k, v in values.items() if k not in train_keys}
    model_values.setdefault("freq_bins", str(freq_bins))
    model_values["num_speakers"] = str(len(speakers))
    if "lr_decay_steps" not in model_values:
        model_values["lr_decay_steps"] = f"{int(0.7 * settings.steps)},{int(0.9 * settings.steps)}"
    try:
        cfg = config_from_dict(ModelConfig, model_values, PRESETS[settings.preset]())
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return settings, cfg


def echo_config(out_dir: Path, sections: dict[str, object]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = []
    for name, obj in sections.items():
        body = dump_config(obj) if dataclasses.is_dataclass(obj) else "".join(f"{k} = {v}\n" for k, v in sorted(obj.items()))
        parts.append(f"# {name}\n{body}")
    (out_dir / "effective_config.txt").write_text("\n".join(parts), encoding="utf-8")


def _args_dict(args) -> dict[str, str]:
    return {k: str(v) for k, v in vars(args).items() if k != "func"}


# subcommands ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    inv = make_speaker_inventory(args.inventory, args.dim, args.separation, args.seed)
    spec = SimulationSpec(
        inv,
        num_speakers=args.speakers,
        beta=args.beta,
        utterances_per_speaker=args.utterances,
        num_mixtures=args.num,
        seed=args.seed,
        dev_mixtures=args.dev,
    )
    out = Path(args.out)
    corpus = build_corpus(spec, out, overwrite=args.overwrite)
    echo_config(out, {"simulate": _args_dict(args)})
    print((out / "stats.txt").read_text(encoding="utf-8"), end="")
    log.info("wrote %d train / %d dev mixtures to %s", len(corpus.train), len(corpus.dev), out)
    return 0


def _loss_logger(path: Path):
    fh = open(path, "w", encoding="utf-8")

    def callback(step, values):
        line = format_log_line(step, values)
        fh.write(line + "\n")
        fh.flush()
        log.info(line)

    return fh, callback


def cmd_train(args) -> int:
    data = training_examples(args.train, _chunk_frames(args))
    speakers = sorted({s for _, a in data for s in a.speakers})
    if not speakers:
        raise RPNSDError(f"{args.train}: references contain no speech")
    settings, cfg = resolve_training_config(args, data[0][0].shape[0], speakers)
    if cfg.chunk_frames != data[0][0].frames:
        data = training_examples(args.train, cfg.chunk_frames)
    out = Path(args.out)
    echo_config(out, {"train": settings, "model": cfg})
    model = RPNSDNet(cfg, speakers)
    fh, callback = _loss_logger(out / "train.log")
    with fh:
        optimizer, _ = train(model, data, settings.steps, settings.batch_size, callback=callback)
    save_checkpoint(out / "model.ckpt", model, optimizer)
    print(f"checkpoint {out / 'model.ckpt'}")
    return 0


def _chunk_frames(args) -> int:
    values = parse_kv(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    values.update(parse_overrides(args.set))
    preset = args.preset or values.get("preset", "desk")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return int(values.get("chunk_frames", PRESETS[preset]().chunk_frames))


def cmd_adapt(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = training_examples(args.train, ckpt.config.chunk_frames)
    out = Path(args.out)
    echo_config(out, {"adapt": _args_dict(args), "model": ckpt.config})
    fh, callback = _loss_logger(out / "adapt.log")
    with fh:
        model, optimizer, _ = adapt(
            ckpt, data, args.steps, lr=args.lr, alpha=args.alpha, batch_size=args.batch_size, callback=callback
        )
    save_checkpoint(out / "model.ckpt", model, optimizer)
    print(f"checkpoint {out / 'model.ckpt'}")
    return 0


def _num_speakers(value: str):
    if value in ("oracle", "auto"):
        return value
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'oracle', 'auto' or a positive integer") from None
    if k < 1:
        raise argparse.ArgumentTypeError("speaker count must be >= 1")
    return k


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    entries = read_manifest(args.manifest)
    recordings, cfgs = [], []
    for e in entries:
        rec = load_features(e.feature_path, e.recording_id)
        if args.num_speakers == "oracle":
            k = max(1, len(load_reference(e).speakers))
        else:
            k = args.num_speakers
        recordings.append(rec)
        cfgs.append(PostprocessConfig(args.gamma, args.nms_threshold, k, seed=ckpt.seed))
    out = Path(args.out)
    echo_config(out.parent, {"infer": _args_dict(args)})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        hyps = diarize_many(model, recordings, cfgs, jobs=args.jobs)
    write_rttm(hyps, out)
    print(f"hypothesis {out}")
    return 0


def cmd_score(args) -> int:
    refs, hyps = read_rttm(args.ref), read_rttm(args.hyp)
    if not refs:
        raise RPNSDError(f"{args.ref}: no reference turns")
    collars = STANDARD_COLLARS if args.collar is None else [args.collar]
    blocks = []
    for collar in collars:
        cfg = ScoringConfig(collar_s=collar, score_overlap=args.score_overlap)
        reports = [der(refs[r], hyps.get(r, Annotation(r)), cfg) for r in sorted(refs)]
        overlap = "scored" if args.score_overlap else "excluded"
        blocks.append(f"# collar={collar:g} overlap={overlap}\n" + format_report(reports, corpus_der(reports)))
    text = "\n".join(blocks)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_stats(args) -> int:
    anns = []
    for path in args.rttm:
        anns.extend(read_rttm(path).values())
    if not anns:
        raise RPNSDError("no annotations")
    s = corpus_overlap_stats(anns)
    print(f"t_spk_ge1={s.t_spk_ge1:.3f} t_spk_ge2={s.t_spk_ge2:.3f} overlap_ratio={100 * s.overlap_ratio:.2f}")
    return 0


# parser ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="key = value file (model and training fields)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rpnsd", description="Region-proposal speaker diarization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--num", type=int, default=10)
    p.add_argument("--dev", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, default=2, help="speakers per mixture")
    p.add_argument("--inventory", type=int, default=20, help="speakers in the synthetic inventory")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--utterances", type=int, default=10)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="fine-tune a checkpoint on new data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=4)
    p.add_argument("--lr", type=float, default=4e-5)
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="diarize recordings from a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="hypothesis RTTM path")
    p.add_argument("--num-speakers", dest="num_speakers", type=_num_speakers, default="oracle")
    p.add_argument("--gamma", type=float, default=GAMMA)
    p.add_argument("--nms-threshold", dest="nms_threshold", type=float, default=POST_NMS_THRESHOLD)
    p.add_argument("--jobs", type=int, default=int(os.environ.get(JOBS_ENV, "1")))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="DER of a hypothesis RTTM against a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--collar", type=float, default=None, help="seconds; default: 0, 0.1 and 0.25")
    p.add_argument("--score-overlap", dest="score_overlap", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("stats", help="overlap statistics of RTTM files")
    p.add_argument("rttm", nargs="+")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (RPNSDError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
