"""Command-line entry point: ``consistency-ae <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .audio import Waveform, read_wav, write_wav
from .checkpoint import CheckpointError, latest_checkpoint, read_checkpoint
from .codec import Codec, DecodeOptions, LatentFormatError, LatentSequence
from .config import PROFILES, ConfigError, load_config
from .dataio import DataError, DatasetSpec, scan
from .metrics import evaluate_directory
from .network import count_parameters
from .training import NumericalError, train

logger = logging.getLogger("consistency_ae")

CHECKPOINT_ENV = "CONSISTENCY_AE_CHECKPOINT_DIR"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_checkpoint_dir() -> Path:
    return Path(os.environ.get(CHECKPOINT_ENV, "checkpoints"))


def _resolve_checkpoint(arg) -> Path:
    """A checkpoint file, or a directory whose newest checkpoint is used."""
    path = Path(arg) if arg else _default_checkpoint_dir()
    if path.is_dir():
        latest = latest_checkpoint(path)
        if latest is None:
            raise FileNotFoundError(f"no checkpoints in {path}")
        return latest
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _check_writable(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_codec(args) -> Codec:
    return Codec.from_checkpoint(
        _resolve_checkpoint(args.checkpoint),
        use_ema=not args.no_ema,
        allow_resample=args.resample,
    )


def _decode_options(args, codec: Codec) -> DecodeOptions:
    steps = args.steps if args.steps is not None else codec.cfg.codec.n_steps
    seed = args.seed if args.seed is not None else codec.cfg.codec.seed
    return DecodeOptions(steps, seed)


# --- commands --------------------------------------------------------------


def cmd_init_config(args) -> int:
    out = _check_writable(Path(args.out), args.force)
    doc = {"profile": args.profile, **PROFILES[args.profile]().to_dict()}
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n")
    tmp.replace(out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out) if args.out else _default_checkpoint_dir()
    existing = latest_checkpoint(out_dir) if out_dir.is_dir() else None
    if existing is not None and not args.resume:
        if not args.force:
            raise UsageError(f"{out_dir} already holds checkpoints; pass --resume to continue or --force to start over")
        for p in out_dir.glob("ckpt_*.cae"):
            p.unlink()
        (out_dir / "loss_log.csv").unlink(missing_ok=True)

    weights = cfg.data.weights or (1.0,) * len(args.data)
    if len(weights) != len(args.data):
        raise ConfigError(f"data.weights has {len(weights)} entries for {len(args.data)} data directories")
    spec = DatasetSpec(
        sources=tuple(zip(args.data, weights)),
        chunk_len=cfg.audio.chunk_len,
        sample_rate=cfg.audio.sample_rate,
        seed=cfg.train.seed,
        resample=cfg.data.resample,
        duration_weighted=cfg.data.duration_weighted,
    )
    index = scan(spec, cache_dir=out_dir / "index_cache")
    logger.info("indexed %d files; config %s", len(index), cfg.config_hash())

    every = max(args.log_every, 1)

    def report(state, info):
        if state.k % every == 0:
            logger.info("iter %d loss %.5f lr %.3g grad %.3g", state.k, info.loss, info.lr, info.grad_norm)

    state = train(cfg, index, out_dir, resume=args.resume, stop_at=args.stop_at, callback=report)
    print(f"trained to iteration {state.k}; checkpoints in {out_dir}")
    return EXIT_OK


def cmd_encode(args) -> int:
    codec = _load_codec(args)
    out = _check_writable(Path(args.output), args.force)
    w = read_wav(args.input, codec.sample_rate, allow_resample=args.resample)
    lat = codec.encode_waveform(w)
    lat.save(out)
    print(f"{args.input}: {len(w)} samples -> latents [{lat.d_lat}, {lat.n_frames}] in {out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    codec = _load_codec(args)
    out = _check_writable(Path(args.output), args.force)
    lat = LatentSequence.load(args.input, codec.cfg.audio.hop)
    if lat.sample_rate != codec.sample_rate:
        raise LatentFormatError(f"latents are for {lat.sample_rate} Hz, the model runs at {codec.sample_rate} Hz")
    w = codec.decode_latents(lat, _decode_options(args, codec))
    write_wav(out, w)
    print(f"wrote {out} ({len(w)} samples)")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    codec = _load_codec(args)
    out = _check_writable(Path(args.output), args.force) if args.output else None
    w = read_wav(args.input, codec.sample_rate, allow_resample=args.resample)
    est, scores = codec.roundtrip(w, _decode_options(args, codec))
    if out is not None:
        write_wav(out, Waveform(est.samples[: len(w)], est.sample_rate))
    print(json.dumps({"file": str(args.input), **scores, "config_hash": codec.config_hash}))
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _check_writable(Path(args.report), args.force)
    if args.est_dir:
        report = evaluate_directory(args.ref_dir, est_dir=args.est_dir)
    else:
        codec = _load_codec(args)
        report = evaluate_directory(args.ref_dir, codec=codec, opts=_decode_options(args, codec), n_fft=codec.cfg.audio.win, hop=codec.cfg.audio.hop)
    if not report.records:
        raise DataError(f"no audio files evaluated under {args.ref_dir}")
    report.write(out)
    print(json.dumps(report.aggregate()))
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = _resolve_checkpoint(args.checkpoint)
    arrays, meta = read_checkpoint(path)
    from .config import config_from_dict

    cfg = config_from_dict(meta["config"])
    n_stored = sum(int(np.prod(v.shape)) for k, v in arrays.items() if k.startswith("params/"))
    info = {
        "checkpoint": str(path),
        "iteration": meta.get("k"),
        "has_ema": bool(meta.get("has_ema")),
        "config_hash": meta.get("config_hash"),
        "parameters": count_parameters(cfg.model),
        "stored_parameters": n_stored,
        "config": cfg.to_dict(),
    }
    print(json.dumps(info, indent=None if args.compact else 2))
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _add_checkpoint(p):
    p.add_argument("--checkpoint", "-c", help=f"checkpoint file or directory (default: ${CHECKPOINT_ENV} or ./checkpoints)")
    p.add_argument("--no-ema", action="store_true", help="use raw instead of EMA weights")
    p.add_argument("--resample", action="store_true", help="resample input audio to the model rate")


def _add_decode(p):
    p.add_argument("--steps", type=int, help="number of consistency denoising steps (default: config)")
    p.add_argument("--seed", type=int, help="noise seed (default: config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="consistency-ae", description="Consistency autoencoder for audio.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-config", help="write a config file for a profile")
    p.add_argument("out")
    p.add_argument("--profile", choices=sorted(PROFILES), default="full")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("train", help="train from directories of WAV files")
    p.add_argument("--config", required=True)
    p.add_argument("--data", nargs="+", required=True, help="one directory per data source")
    p.add_argument("--out", help=f"checkpoint directory (default: ${CHECKPOINT_ENV} or ./checkpoints)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true", help="discard existing checkpoints in --out")
    p.add_argument("--stop-at", type=int, help="stop after this iteration (for staged runs)")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="waveform -> latent file")
    p.add_argument("input")
    p.add_argument("output")
    _add_checkpoint(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="latent file -> waveform")
    p.add_argument("input")
    p.add_argument("output")
    _add_checkpoint(p)
    _add_decode(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("roundtrip", help="encode and decode one file and print its scores")
    p.add_argument("input")
    p.add_argument("output", nargs="?")
    _add_checkpoint(p)
    _add_decode(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("eval", help="score a directory of references")
    p.add_argument("ref_dir")
    p.add_argument("report", help="output JSON-lines report")
    p.add_argument("--est-dir", help="score existing estimates instead of running the codec")
    _add_checkpoint(p)
    _add_decode(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print a checkpoint summary")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--compact", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, LatentFormatError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
