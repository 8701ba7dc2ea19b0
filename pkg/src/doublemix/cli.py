"""Command-line entry point: ``doublemix {gen-corpus,run,report,grad-check}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import CorpusSpec, build_task_stream, check_stream, write_corpus
from .experiment import (ExperimentConfig, check_run_dir, collect_metrics, emit_report,
                         objective_gradient_check, run_seed)
from .losses import ConfigError

log = logging.getLogger("doublemix")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(args) -> ExperimentConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.method:
        raw["method"] = args.method
    if args.seed:
        raw["seeds"] = args.seed
    if args.order:
        raw["task_order"] = args.order
    if args.output_dir:
        raw["output_dir"] = args.output_dir
    return ExperimentConfig.from_dict(raw)


def cmd_gen_corpus(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    spec = CorpusSpec.from_dict(raw.get("corpus", raw))
    if args.seed is not None:
        spec = CorpusSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    stream = build_task_stream(spec)
    check_stream(stream)
    manifest = write_corpus(stream, args.out)
    (Path(args.out) / "corpus.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"wrote {sum(1 for _ in manifest.open())} clips to {args.out}")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    failures = 0
    for seed in config.seeds:
        out = Path(config.output_dir) / config.method / f"seed_{seed}"
        try:
            result = run_seed(config, seed, out)
        except Exception as exc:  # report and keep going with the other seeds
            log.error("%s seed %d failed: %s", config.method, seed, exc)
            failures += 1
            continue
        problems = check_run_dir(out)
        if problems:
            log.error("%s: %s", out, ", ".join(problems))
            failures += 1
            continue
        m = result.metrics()
        fgt = "n/a" if m["avg_forgetting"] is None else f"{m['avg_forgetting']:.2f}"
        line = f"{config.method} seed {seed}: avg_acc {m['avg_acc']:.2f} forgetting {fgt}"
        if "combined_avg_acc" in m:
            line += f" combined {m['combined_avg_acc']:.2f}"
        print(line)
    return 1 if failures else 0


def cmd_report(args) -> int:
    metrics = collect_metrics(args.root)
    if not metrics:
        log.error("no metrics.json under %s", args.root)
        return 1
    rows = emit_report(metrics, args.out)
    for row in rows:
        print(",".join(str(row[k]) for k in row))
    return 0


def cmd_grad_check(args) -> int:
    worst = 0.0
    for seed in args.seeds:
        err = objective_gradient_check(seed, epsilon=args.epsilon)
        print(f"seed {seed}: max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doublemix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="synthesise a corpus to WAV files plus a manifest")
    p.add_argument("--config", help="JSON corpus spec (or experiment config with a 'corpus' key)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("run", help="train one method over a curriculum for each seed")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--method")
    p.add_argument("--seed", type=_int_list, help="comma-separated seeds, e.g. 1,2,3")
    p.add_argument("--order", type=_int_list, help="task permutation, e.g. 2,0,1")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarise every metrics.json under a directory")
    p.add_argument("--root", default="runs")
    p.add_argument("--out", default="runs/summary.csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grad-check", help="finite-difference check of the training objective")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
