"""Command line: noise, train, eval, verify, report.

Exit status is 0 on success, 1 for usage errors, 2 when a command fails at runtime.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _apply_overrides(spec, args):
    from .trainer import normalize_variant

    if getattr(args, "seed", None) is not None:
        spec.seeds = (args.seed,)
    if getattr(args, "ratio", None) is not None:
        spec.noise_ratios = (args.ratio,)
    if getattr(args, "variant", None):
        try:
            normalize_variant(args.variant)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        spec.variants = (args.variant,)
    if getattr(args, "out", None):
        spec.out_dir = Path(args.out)
    return spec


def _load_spec(args):
    from .experiment import ConfigError, read_spec

    if not args.config:
        raise UsageError("--config is required")
    try:
        spec = read_spec(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    return _apply_overrides(spec, args)


# ------------------------------------------------------------------ commands


def cmd_noise(args) -> int:
    from .graph import inject_noise_labeled, load_labeled_graph, save_noisy_graph

    if args.ratio is None or args.ratio < 0:
        raise UsageError("--ratio must be given and non-negative")
    if args.config:
        spec = _load_spec(args)
        ds = spec.load()
        graph, labels = ds.graph, ds.labels
    elif args.edges and args.labels:
        graph, labels, _ = load_labeled_graph(args.edges, args.labels)
    else:
        raise UsageError("give --config, or --edges and --labels")
    if not args.out:
        raise UsageError("--out is required")
    noisy = inject_noise_labeled(graph, labels, args.ratio, args.seed or 0)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_noisy_graph(noisy, args.out)
    print(f"wrote {args.out}: {noisy.graph.n_edges} edges, {noisy.n_injected} injected")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiment import format_csv, run_grid

    spec = _load_spec(args)
    rows = run_grid(spec, workers=args.workers)
    sys.stdout.write(format_csv(rows))
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        print(f"{len(failed)} of {len(rows)} runs failed", file=sys.stderr)
    return EXIT_RUNTIME if len(failed) == len(rows) else EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import evaluate_run
    from .graph import load_noisy_graph
    from .trainer import Problem, TrainReport, edge_weights, evaluate_modularity, load_checkpoint

    if not (args.config and args.checkpoint and args.noisy):
        raise UsageError("eval needs --config, --checkpoint and --noisy")
    spec = _load_spec(args)
    dataset = spec.load()
    config, w, theta = load_checkpoint(args.checkpoint)
    noisy = load_noisy_graph(args.noisy, dataset.graph.n_nodes)
    if noisy.clean_graph.n_edges != dataset.graph.n_edges:
        raise ValueError("noisy graph was not derived from this dataset")
    noisy = replace(noisy, clean_graph=dataset.graph)
    problem = Problem.build(dataset.with_graph(noisy.graph), config)
    _, p = evaluate_modularity(problem, w)
    report = TrainReport(config, [], [], 0, float("nan"), w, theta, 0, 0.0, p, edge_weights(problem, w, theta))
    row = evaluate_run(report, dataset, noisy, spec.hits_frac)
    row.pop("epochs")
    text = json.dumps(row)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    report = run_suite(seed=args.seed or 0, trials=args.trials)
    print("\n".join(report.lines()))
    print("all checks passed" if report.passed else "some checks FAILED")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_report(args) -> int:
    from .experiment import report

    run_dir = Path(args.out or args.run_dir or "")
    if not (run_dir / "results.csv").is_file():
        raise UsageError(f"no results.csv in {run_dir}")
    sys.stdout.write(report(run_dir))
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metaclust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, *flags):
        if "config" in flags:
            p.add_argument("--config", help="experiment config file")
        if "seed" in flags:
            p.add_argument("--seed", type=int)
        if "ratio" in flags:
            p.add_argument("--ratio", type=float)
        if "variant" in flags:
            p.add_argument("--variant", help="metagc, metagc-x or metagc-a")
        if "out" in flags:
            p.add_argument("--out")

    p = sub.add_parser("noise", help="inject cross-class noise edges")
    common(p, "config", "seed", "ratio", "out")
    p.add_argument("--edges")
    p.add_argument("--labels")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("train", help="run the configured seed x ratio grid")
    common(p, "config", "seed", "ratio", "variant", "out")
    p.add_argument("--workers", type=int, default=None, help="overrides METACLUST_THREADS")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a saved noisy graph")
    common(p, "config", "out")
    p.add_argument("--checkpoint")
    p.add_argument("--noisy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the property and gradient checks")
    common(p, "seed")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="aggregate results.csv into mean/std tables")
    common(p, "out")
    p.add_argument("run_dir", nargs="?")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"metaclust {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"metaclust {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
