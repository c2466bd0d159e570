"""Command line entry point: ``maskdiff {gen-lang,sample,sweep,verify,plot}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import formal_lang, harness
from .errors import ConfigError, MaskDiffError

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2


def _load_config(args) -> harness.ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = harness.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    return cfg


def _print_rows(rows, fmt: str):
    if fmt == "jsonl":
        for r in rows:
            print(json.dumps(dataclasses.asdict(r)))
        return
    print(",".join(harness.ROW_FIELDS))
    for r in rows:
        print(",".join(harness._fmt(getattr(r, k)) for k in harness.ROW_FIELDS))


def cmd_gen_lang(args) -> int:
    if args.config:
        spec = json.loads(Path(args.config).read_text())
        spec = spec.get("language", spec)
    else:
        spec = {"kind": args.kind, "n": args.order, "num_states": args.states, "vocab_size": args.vocab,
                "temperature": args.temperature, "threshold": args.threshold, "seed": args.seed or 0, "l": args.l}
    if spec["kind"] == "interval" and not args.L:
        raise ConfigError("the interval language needs --L")
    model = harness.build_language(spec, args.L or 0)
    text = formal_lang.dumps(model) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    sampler = {"name": args.sampler} if args.sigma is None else {"name": args.sampler, "sigma": args.sigma}
    schedule = None if args.sampler in harness.STEP_FREE else {"kind": "linear", "N": args.N}
    if schedule and args.N is None:
        raise ConfigError("--N is required for diffusion samplers")
    cfg = dataclasses.replace(cfg, lengths=[args.L], samplers=[sampler], schedules=[schedule] if schedule else [],
                              num_sequences=args.num or cfg.num_sequences)
    cfg.check()
    cell = harness.Cell(args.L, schedule, sampler)
    reason = harness._check_cell(cfg, cell)
    if reason:
        raise ConfigError(reason)
    _print_rows(harness.run_cell(cfg, cell), args.format or "csv")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rows = harness.run_sweep(cfg, jobs=args.jobs)
    if not rows:
        raise ConfigError("no valid cells in the sweep")
    out = args.out or cfg.output_dir
    formats = ("csv", "jsonl", "svg") if args.format is None else (args.format, "svg")
    for p in harness.emit_report(rows, out, formats, cfg.hash()):
        logging.getLogger("maskdiff").info("wrote %s", p)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = harness.run_verification(args.seed or 0, quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_plot(args) -> int:
    if not args.rows:
        raise ConfigError("--rows is required")
    rows = harness.read_csv(args.rows)
    if not rows:
        raise ConfigError(f"{args.rows} has no rows")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for p in harness.write_svgs(rows, out):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment or language JSON")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--format", choices=["csv", "jsonl"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="maskdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-lang", parents=[common], help="emit a language as JSON")
    g.add_argument("--kind", choices=["ngram", "hmm", "interval"], default="ngram")
    g.add_argument("--order", type=int, default=2)
    g.add_argument("--states", type=int, default=4)
    g.add_argument("--vocab", type=int, default=8)
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--threshold", type=float, default=0.0)
    g.add_argument("--l", type=int, default=5)
    g.add_argument("--L", type=int)
    g.set_defaults(func=cmd_gen_lang)

    s = sub.add_parser("sample", parents=[common], help="run one cell and print its metrics")
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--N", type=int)
    s.add_argument("--sampler", choices=harness.SAMPLERS, default="mdm")
    s.add_argument("--sigma", type=float)
    s.add_argument("--num", type=int)
    s.set_defaults(func=cmd_sample)

    w = sub.add_parser("sweep", parents=[common], help="run a full experiment config")
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", parents=[common], help="run the bound-checking suites")
    v.add_argument("--quick", action="store_true", help="fewer Monte Carlo trials")
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", parents=[common], help="draw SVG charts from a results CSV")
    pl.add_argument("--rows", help="results CSV")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MaskDiffError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
