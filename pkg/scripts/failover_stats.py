"""Kill the master of a stable cluster many times and summarize takeover times.

    python3 scripts/failover_stats.py [--runs 500] [--skew-ppm 10000]
"""

import argparse
import statistics
import sys

from keyspace.harness.scenarios import failover_run


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skew-ppm", type=int, default=10_000)
    args = ap.parse_args()
    runs = [failover_run(s, max_skew_ppm=args.skew_ppm) for s in range(args.seed, args.seed + args.runs)]
    times = sorted(r.takeover / 1e6 for r in runs if r.takeover is not None)
    unsafe = sum(not r.ok for r in runs)
    print(f"runs {len(runs)}, new master in {len(times)}, two masters in {unsafe}")
    if times:
        pct = lambda q: times[min(len(times) - 1, int(q * len(times)))]
        print(f"takeover s: min {times[0]:.2f} median {statistics.median(times):.2f} "
              f"p99 {pct(0.99):.2f} max {times[-1]:.2f}")
        print(f"within 14 s: {sum(t <= 14 for t in times)}/{len(runs)}")
    return 3 if unsafe else 0


if __name__ == "__main__":
    sys.exit(main())
