"""Command-line entry point: ``codetensor <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence.
"""

from __future__ import annotations

import argparse
import sys

from . import corpus, pipeline
from .config import load_config
from .errors import CodeTensorError, ConfigError
from .report import report_render

STAGE_VERBS = ("encode", "cut", "select", "compress", "train-detector", "train-gan", "evaluate")


def _common(p):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--corpus", help="corpus directory (paths.corpus)")
    p.add_argument("--work", help="work directory (paths.work)")


def build_parser():
    parser = argparse.ArgumentParser(prog="codetensor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    _common(p)
    p.add_argument("--n-benign", type=int)
    p.add_argument("--n-malware", type=int)
    p.add_argument("--seed", type=int)

    for verb in STAGE_VERBS:
        _common(sub.add_parser(verb, help=f"run the {verb} stage"))

    p = sub.add_parser("pipeline", help="run every stage")
    _common(p)
    p.add_argument("--synth", action="store_true", help="synthesize the corpus first")

    p = sub.add_parser("report", help="print a report CSV as a table")
    p.add_argument("report_csv")
    p.add_argument("--history", help="training history CSV to plot")
    p.add_argument("--plot", metavar="PREFIX", help="write PREFIX.csv and PREFIX.svg")
    return parser


def _overrides(args):
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.corpus:
        out["paths.corpus"] = args.corpus
    if args.work:
        out["paths.work"] = args.work
    for flag, key in (("n_benign", "corpus.n_benign"), ("n_malware", "corpus.n_malware"), ("seed", "corpus.seed")):
        if getattr(args, flag, None) is not None:
            out[key] = getattr(args, flag)
    return out


def run(args) -> int:
    if args.verb == "report":
        if args.plot and not args.history:
            raise ConfigError("--plot needs --history")
        sys.stdout.write(report_render(args.report_csv, args.history, args.plot))
        return 0
    cfg = load_config(args.config, _overrides(args))
    if args.verb == "synth":
        m = corpus.synth_corpus(cfg["corpus.n_benign"], cfg["corpus.n_malware"], cfg["corpus.seed"],
                                cfg["paths.corpus"], cfg["corpus.variant_rate"])
        print(f"wrote {len(m)} samples to {cfg['paths.corpus']}")
    elif args.verb == "pipeline":
        pipeline.run_pipeline(cfg, synth=args.synth)
        sys.stdout.write(report_render(f"{cfg['paths.work']}/report.csv"))
    else:
        pipeline.run_stage(cfg, args.verb)
        if args.verb == "evaluate":
            sys.stdout.write(report_render(f"{cfg['paths.work']}/report.csv"))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except CodeTensorError as exc:
        print(f"codetensor: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except NotImplementedError as exc:
        print(f"codetensor: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
