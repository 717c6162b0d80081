"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation/config error,
3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import embedding_store as es
from .clip_align import TrainConfig, load_clip, project_audio, save_clip, train_clip
from .errors import AvclipError, ConfigError, TrainingAborted, ValidationError
from .evaluation import emit_report, retrieval_metrics, write_ranks_csv
from .goal_prior import PriorConfig, load_prior, map_audio_to_goal, save_prior, train_prior
from .synthetic_bench import SyntheticSpec, generate
from .windowing import WindowSpec, compute_windows, read_media_info

log = logging.getLogger("avclip")

OUTPUT_ROOT_ENV = "AVCLIP_OUTPUT_ROOT"
INGEST_TRIM_S = 120.0

PRESETS = {
    "train-clip": {"desk": {"batch_size": 256, "epochs": 30}},
    "train-prior": {"desk": {"epochs": 200}},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# Config resolution


@dataclasses.dataclass
class RunConfig:
    command: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def to_json(self):
        return {"command": self.command, **self.values}


def _check_keys(given, allowed, where):
    for key in given:
        if key not in allowed:
            close = difflib.get_close_matches(key, allowed, n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ConfigError(f"unknown config key {key!r} in {where}{hint}")


def resolve_config(command: str, defaults: dict, file=None, flags=None, preset=None) -> RunConfig:
    """Merge ``defaults < preset < file < flags``; unknown keys are rejected."""
    allowed = list(defaults)
    values = dict(defaults)
    file_values = {}
    if file:
        try:
            with open(file) as fh:
                text = fh.read()
            file_values = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {file} is not valid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {file} must hold a JSON object")
        preset = file_values.pop("preset", None) if preset is None else preset
        _check_keys(file_values, allowed, str(file))
    if preset:
        table = PRESETS.get(command, {})
        if preset not in table:
            raise ConfigError(f"unknown preset {preset!r} for {command}; available: {sorted(table)}")
        values.update(table[preset])
    values.update(file_values)
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    _check_keys(flags, allowed, "command-line flags")
    values.update(flags)
    return RunConfig(command, values)


def persist_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)


def _dataclass_defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def _build(cls, cfg: RunConfig):
    try:
        return cls(**cfg.values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


# --------------------------------------------------------------------------
# Loading helpers


def _load_matrix(path, expected_dim=None, modality=None) -> es.EmbeddingMatrix:
    path = str(path)
    if path.endswith(".npy"):
        return es.EmbeddingMatrix(modality or "audio", np.load(path), expected_dim)
    return es.read_embeddings(path, expected_dim)


def _load_dataset(args) -> es.PairedDataset:
    audio = es.read_embeddings(args.audio, 0)
    video = es.read_embeddings(args.video, 0)
    manifest = es.read_manifest(args.pairs) if args.pairs else es.PairManifest.identity(audio.rows)
    return es.PairedDataset(audio, video, manifest)


# --------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args):
    audio = _load_matrix(args.audio, args.audio_dim, "audio")
    video = _load_matrix(args.video, args.video_dim, "video")
    audio = es.EmbeddingMatrix("audio", audio.data, args.audio_dim)
    video = es.EmbeddingMatrix("video", video.data, args.video_dim)
    if args.pairs:
        manifest = es.read_manifest(args.pairs)
    else:
        if audio.rows != video.rows:
            raise ValidationError(f"audio has {audio.rows} rows but video has {video.rows}; pass --pairs")
        manifest = es.PairManifest.identity(audio.rows, args.source_id)
    ds = es.split_pairs(es.PairedDataset(audio, video, manifest), args.test_fraction, args.seed)
    out = Path(args.out_dir or _output_root() / "ingest")
    out.mkdir(parents=True, exist_ok=True)
    es.write_embeddings(out / "audio.emb", ds.audio)
    es.write_embeddings(out / "video.emb", ds.video)
    es.write_manifest(out / "pairs.json", ds.manifest)
    cfg = RunConfig("ingest", {"test_fraction": args.test_fraction, "seed": args.seed,
                               "audio_dim": args.audio_dim, "video_dim": args.video_dim})
    persist_config(cfg, out / "config.json")
    print(f"wrote {len(ds)} pairs to {out}")


def cmd_window(args):
    spec_flags = {"window_len_s": args.window_len, "overlap": args.overlap, "fps": args.fps,
                  "n_frames": args.n_frames, "sample_rate": args.sample_rate}
    if args.media:
        info = read_media_info(args.media)
        base = {k: info[k] for k in ("fps", "sample_rate") if k in info}
        duration, source_id = float(info["duration_s"]), str(info["source_id"])
        trim = args.trim if args.trim is not None else float(info.get("trim_s", INGEST_TRIM_S))
    elif args.duration is not None:
        base, duration, source_id = {}, args.duration, args.source_id
        trim = args.trim or 0.0
    else:
        raise UsageError("window: one of --media or --duration is required")
    cfg = resolve_config("window", dataclasses.asdict(WindowSpec()), None, {**base, **spec_flags})
    spec = WindowSpec(**cfg.values)
    manifest = compute_windows(duration, spec, source_id=source_id, trim_s=trim)
    text = json.dumps(manifest.to_json(), indent=1)
    if args.out:
        Path(args.out).write_text(text)
        persist_config(RunConfig("window", {**cfg.values, "trim_s": trim, "duration_s": duration}),
                       f"{args.out}.config.json")
    else:
        print(text)


def cmd_synth(args):
    defaults = {**_dataclass_defaults(SyntheticSpec), "test_fraction": 0.1}
    cfg = resolve_config("synth", defaults, args.spec, {"seed": args.seed, "n_pairs": args.n_pairs})
    values = dict(cfg.values)
    test_fraction = values.pop("test_fraction")
    spec = SyntheticSpec(**values)
    ds, _ = generate(spec)
    ds = es.split_pairs(ds, test_fraction, spec.seed)
    out = Path(args.out_dir or _output_root() / "synth")
    out.mkdir(parents=True, exist_ok=True)
    es.write_embeddings(out / "audio.emb", ds.audio)
    es.write_embeddings(out / "video.emb", ds.video)
    es.write_manifest(out / "pairs.json", ds.manifest)
    persist_config(cfg, out / "config.json")
    print(f"wrote {spec.n_pairs} synthetic pairs to {out}")


def _write_history(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(x)) for x in r[2:]])


def _train_flags(args, names):
    return {n: getattr(args, n, None) for n in names}


def cmd_train_clip(args):
    flags = _train_flags(args, ("batch_size", "lr", "epochs", "seed", "weight_decay", "hidden_dim", "n_layers"))
    cfg = resolve_config("train-clip", _dataclass_defaults(TrainConfig), args.config, flags, args.preset)
    ds = _load_dataset(args)
    if ds.audio.dim != cfg["audio_dim"] or ds.video.dim != cfg["video_dim"]:
        raise ValidationError(
            f"embedding dims audio={ds.audio.dim}, video={ds.video.dim} do not match expected "
            f"audio={cfg['audio_dim']}, video={cfg['video_dim']}"
        )
    config = _build(TrainConfig, cfg)
    model, history = train_clip(ds, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_clip(out, model, len(history))
    _write_history(f"{out}.loss.csv", history, ["epoch", "batch", "loss"])
    persist_config(cfg, f"{out}.config.json")
    print(f"trained {len(history)} steps; final loss {history[-1][2]:.4f}; checkpoint {out}")


def cmd_train_prior(args):
    flags = _train_flags(args, ("batch_size", "lr", "epochs", "seed", "kl_weight", "latent_dim"))
    cfg = resolve_config("train-prior", _dataclass_defaults(PriorConfig), args.config, flags, args.preset)
    cond = es.read_embeddings(args.cond, 0)
    target = es.read_embeddings(args.target, 0)
    manifest = es.read_manifest(args.pairs) if args.pairs else es.PairManifest.identity(cond.rows)
    ds = es.PairedDataset(cond, target, manifest)
    c, t = ds.arrays("train")
    if args.clip:
        c = project_audio(load_clip(args.clip), c)
    config = _build(PriorConfig, cfg)
    prior, history = train_prior(c, t, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_prior(out, prior, len(history))
    _write_history(f"{out}.loss.csv", history, ["epoch", "batch", "total", "recon", "kl"])
    persist_config(cfg, f"{out}.config.json")
    print(f"trained prior for {len(history)} steps; checkpoint {out}")


def cmd_map(args):
    clip = load_clip(args.clip)
    prior = load_prior(args.prior)
    audio = es.read_embeddings(args.inp, clip.audio_net.in_dim)
    goals = map_audio_to_goal(clip, prior, audio.data, seed=args.seed)
    es.write_embeddings(args.out, es.EmbeddingMatrix("goal", goals, prior.goal_dim))
    persist_config(RunConfig("map", {"seed": args.seed, "clip": str(args.clip), "prior": str(args.prior)}),
                   f"{args.out}.config.json")
    print(f"wrote {audio.rows} goal embeddings to {args.out}")


def cmd_eval(args):
    model = load_clip(args.clip)
    ds = _load_dataset(args)
    ks = [int(k) for k in args.ks.split(",")]
    n_test = len(ds.manifest.indices("test")[0])
    ks = [k for k in ks if k <= n_test] or [1]
    report = retrieval_metrics(model, ds, ks, args.direction)
    emit_report(report, args.out)
    write_ranks_csv(args.ranks_csv or f"{args.out}.ranks.csv", report)
    print(json.dumps(report.to_json(), indent=2))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avclip", description="Audio-video contrastive alignment and goal prior.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("ingest", help="validate encoder outputs and write EMB1 files + split manifest")
    s.add_argument("--audio", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--pairs")
    s.add_argument("--out-dir")
    s.add_argument("--source-id", default="ingest")
    s.add_argument("--test-fraction", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--audio-dim", type=int, default=es.AUDIO_DIM)
    s.add_argument("--video-dim", type=int, default=es.VIDEO_DIM)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("window", help="sliding-window manifest for one media source")
    s.add_argument("--media", help="media-info JSON with source_id, duration_s, fps, sample_rate")
    s.add_argument("--duration", type=float)
    s.add_argument("--source-id", default="media")
    s.add_argument("--trim", type=float)
    s.add_argument("--window-len", type=float)
    s.add_argument("--overlap", type=float)
    s.add_argument("--fps", type=float)
    s.add_argument("--n-frames", type=int)
    s.add_argument("--sample-rate", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_window)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    s.add_argument("--spec")
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-pairs", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-clip", help="train the contrastive transformation networks")
    s.add_argument("--pairs")
    s.add_argument("--audio", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(PRESETS["train-clip"]))
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--hidden-dim", type=int)
    s.add_argument("--n-layers", type=int)
    s.set_defaults(func=cmd_train_clip)

    s = sub.add_parser("train-prior", help="train the CVAE goal prior")
    s.add_argument("--cond", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--pairs")
    s.add_argument("--clip", help="project --cond through this checkpoint's audio network first")
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(PRESETS["train-prior"]))
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--kl-weight", type=float)
    s.add_argument("--latent-dim", type=int)
    s.set_defaults(func=cmd_train_prior)

    s = sub.add_parser("map", help="map audio-encoder logits to goal embeddings")
    s.add_argument("--clip", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("eval", help="held-out cross-modal retrieval report")
    s.add_argument("--clip", required=True)
    s.add_argument("--pairs")
    s.add_argument("--audio", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--ks", default="1,5,10")
    s.add_argument("--direction", choices=["audio_to_video", "video_to_audio"], default="audio_to_video")
    s.add_argument("--out", required=True)
    s.add_argument("--ranks-csv")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except (AvclipError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
