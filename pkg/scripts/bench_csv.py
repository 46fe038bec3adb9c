"""Run the standard benchmark set and write per-instance costs as CSV.

    python3 scripts/bench_csv.py [--ops 500] [--out bench.csv]
"""

import argparse
import sys

from keyspace.harness.bench import run_bench, standard_suite, to_csv


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--ops", type=int, default=500)
    ap.add_argument("--out")
    args = ap.parse_args()
    out = to_csv([run_bench(s) for s in standard_suite(args.ops)])
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(out)
    else:
        sys.stdout.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
