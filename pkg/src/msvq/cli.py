"""``msvq`` command line: train, encode, decode, eval, synth, ingest.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import MSVQError, ValidationError
from .metrics import rate_report
from .trainer import (decode_container, encode_clip, evaluate, format_report, load_checkpoint,
                      load_config, train_loop)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("msvq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _load_model(path):
    if not Path(path).is_file():
        raise ValidationError(f"--ckpt: checkpoint not found: {path}")
    return load_checkpoint(path).model


def cmd_train(args) -> int:
    if not Path(args.config).is_file():
        raise ValidationError(f"--config: config file not found: {args.config}")
    model_config, train_config = load_config(args.config)
    if args.seed is not None:
        train_config = replace(train_config, seed=args.seed)
    if args.synthetic is not None:
        t, h, w = train_config.synthetic_dims
        clips = np.stack([data_mod.synth_clip(train_config.seed * 100003 + i, t, h, w).data
                          for i in range(args.synthetic)])
    else:
        manifest = data_mod.read_manifest(args.data)
        records = manifest.split("train")
        if not records:
            raise ValidationError(f"--data: {args.data} has no train split")
        clips = np.stack([data_mod.load_clip(manifest, r) for r in records])
    result = train_loop(train_config, model_config, clips, out_dir=args.out,
                        resume=args.resume, max_steps=args.max_steps)
    last = result.records[-1] if result.records else {}
    print(json.dumps({"steps": result.step, "total_steps": result.total_steps,
                      "loss": last.get("loss"),
                      "checkpoints": [str(p) for p in result.checkpoints]}))
    return EXIT_OK


def cmd_encode(args) -> int:
    model = _load_model(args.ckpt)
    clip = data_mod.ingest_frames(args.input, size=None)
    blob = encode_clip(model, clip.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    report = rate_report(blob)
    print(json.dumps({**asdict(report), "ratio_vs_raw24": report.ratio_vs_raw24,
                      "bytes": len(blob)}, sort_keys=True))
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.ckpt)
    path = Path(args.input)
    if not path.is_file():
        raise ValidationError(f"--in: container not found: {path}")
    recon = decode_container(model, path.read_bytes())
    data_mod.write_clip(args.out, recon)
    print(json.dumps({"frames": int(recon.shape[1]), "out": str(args.out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    manifest = data_mod.read_manifest(args.data)
    records = manifest.split(args.split)
    clips = ((r.id, data_mod.load_clip(manifest, r)) for r in records)
    per_clip, agg = evaluate(model, clips)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for rec in per_clip:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"aggregate": agg, "split": args.split}, sort_keys=True) + "\n")
    table = format_report(agg)
    out.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_synth(args) -> int:
    m = data_mod.synth_dataset(args.out, args.clips, seed=args.seed, t=args.dims[0],
                               h=args.dims[1], w=args.dims[2])
    print(json.dumps({"clips": len(m.records),
                      "splits": {s: len(m.split(s)) for s in data_mod.SPLITS}}))
    return EXIT_OK


def cmd_ingest(args) -> int:
    m = data_mod.ingest_tree(args.frames, args.out, fps=args.fps, seed=args.seed)
    print(json.dumps({"clips": len(m.records),
                      "splits": {s: len(m.split(s)) for s in data_mod.SPLITS}}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msvq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="JSON file with 'model' and 'train' sections")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset directory with a manifest (uses the train split)")
    src.add_argument("--synthetic", type=_positive, metavar="N", help="train on N synthetic clips")
    p.add_argument("--out", required=True, help="output directory for checkpoints and log")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=_positive, help="stop after this global step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a clip directory to a container")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="clip directory of P6 frames")
    p.add_argument("--out", required=True, help="output .msvq file")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a container to P6 frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="input .msvq file")
    p.add_argument("--out", required=True, help="output clip directory")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=["val", "test"])
    p.add_argument("--out", required=True, help="JSONL report path (table written next to it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=_positive, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_positive, nargs=3, metavar=("T", "H", "W"),
                   default=[data_mod.CLIP_FRAMES, *data_mod.FRAME_SIZE])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="resize, segment and split a tree of P6 frames")
    p.add_argument("--frames", required=True, help="root of <class>/<video>/*.ppm")
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=_positive, default=data_mod.CLIP_FPS, help="source frame rate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"msvq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MSVQError as exc:
        print(f"msvq {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
