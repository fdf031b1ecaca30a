"""Run an experiment config and print the aggregated tables.

    python3 scripts/run_grid.py scripts/sbm_noise.ini [--out DIR]
"""
import argparse
import logging
from pathlib import Path

from metaclust.experiment import read_spec, report, run_grid


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    spec = read_spec(args.config)
    if args.out:
        spec.out_dir = Path(args.out)
    run_grid(spec)
    print(report(spec.out_dir))


if __name__ == "__main__":
    main()
