"""Command-line entry point: ``jcast <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numeric,
1 any other toolkit error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import (ConfigError, DataError, InitializationError, JcastError, NumericError,
                     SearchSpaceError)
from .experiment import (ExperimentSpec, cmd_synth, dump_json, load_json, read_jsonl, references,
                         run_decode, run_score, run_sweep, run_train_asr, run_train_st)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 3, 4, 5, 1

TRAIN_FLAGS = {"epochs": int, "seed": int, "ctc_weight": float, "peak_lr": float,
               "warmup_steps": int, "batch_size": int}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for name, typ in TRAIN_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None,
                       help=f"override train.{name}")


def _train_overrides(args, config: dict) -> dict:
    config = dict(config)
    train = dict(config.get("train") or {})
    for name in TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            train[name] = v
    config["train"] = train
    return config


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jcast", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("spec", help="JSON synthetic task spec")
    p.add_argument("--out", required=True, help="corpus directory to write")

    p = sub.add_parser("train-asr", help="train an ASR model")
    p.add_argument("config", help='JSON {"corpora": [...], "model": {...}, "train": {...}}')
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(p)

    p = sub.add_parser("train-st", help="train an ST model, optionally from an ASR checkpoint")
    p.add_argument("config", help='JSON {"corpus": dir, "init": ckpt, "retain_ctc": bool, ...}')
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", default=None, help="override the ASR checkpoint to start from")
    p.add_argument("--discard-ctc", action="store_true", help="reset the target CTC head")
    _add_train_flags(p)

    p = sub.add_parser("decode", help="joint CTC/attention beam search")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="hypotheses JSONL")
    p.add_argument("--beta", type=float, default=0.3, help="CTC weight in decoding")
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--lang", default=None, help="output language (default: manifest target)")
    p.add_argument("--pre-beam", default=None, help="attention pre-pruning width or 'full'")
    p.add_argument("--max-len", type=int, default=None)

    p = sub.add_parser("score", help="score hypotheses against a manifest")
    p.add_argument("--hyps", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--side", default="translation", choices=("transcript", "translation"))
    p.add_argument("--metrics", default="bleu,chrf2", help="comma list of bleu, chrf2, wer, cer")
    p.add_argument("--out", default=None, help="score report JSON (default: stdout)")

    p = sub.add_parser("sweep", help="run an init x alpha x beta experiment grid")
    p.add_argument("spec", help="JSON experiment spec")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="cells trained in parallel")
    return ap


def _pre_beam(v: str | None):
    if v is None or v == "full":
        return v
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"--pre-beam must be an integer or 'full', got {v!r}") from None


def run(args) -> None:
    if args.command == "synth":
        corpus = cmd_synth(load_json(args.spec), Path(args.out))
        print(f"wrote {len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} "
              f"train/dev/test utterances to {args.out}")
    elif args.command == "train-asr":
        steps = run_train_asr(_train_overrides(args, load_json(args.config)), Path(args.out))
        print(f"trained {steps} steps; checkpoint {args.out}")
    elif args.command == "train-st":
        config = _train_overrides(args, load_json(args.config))
        if args.init:
            config["init"] = args.init
        if args.discard_ctc:
            config["retain_ctc"] = False
        steps = run_train_st(config, Path(args.out))
        print(f"trained {steps} steps; checkpoint {args.out}")
    elif args.command == "decode":
        decode = {"beam": args.beam, "ctc_weight": args.beta, "lang": args.lang,
                  "pre_beam": _pre_beam(args.pre_beam), "max_len": args.max_len}
        recs = run_decode(Path(args.ckpt), Path(args.manifest), decode, Path(args.out))
        print(f"decoded {len(recs)} utterances to {args.out}")
    elif args.command == "score":
        metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
        report = run_score(read_jsonl(Path(args.hyps)), references(Path(args.manifest), args.side),
                           metrics)
        if args.out:
            dump_json(report, Path(args.out))
        for m, r in report.items():
            print(f"{m} = {r['value']:.2f} ({r['signature']})")
    elif args.command == "sweep":
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        result = run_sweep(ExperimentSpec.from_dict(load_json(args.spec)), args.out, args.jobs)
        sys.stdout.write(result.table)
        print(f"training steps executed: {result.steps}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ConfigError, InitializationError, SearchSpaceError) as e:
        print(f"jcast: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"jcast: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"jcast: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (JcastError, json.JSONDecodeError) as e:
        print(f"jcast: error: {e}", file=sys.stderr)
        return EXIT_OTHER
    return 0


if __name__ == "__main__":
    sys.exit(main())
