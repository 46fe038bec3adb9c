"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 a checker or the
explorer found a violation.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2, 3


def percent(p: float) -> str:
    """Percentage truncated (not rounded) to two decimals, as in the published table."""
    return f"{math.floor(p * 10_000 + 1e-9) / 100:.2f}%"


def _cmd_liveness(args) -> int:
    from .liveness import DomainError, liveness_probability, table
    if args.table:
        for n, maj, p in table(range(1, args.n + 1 if args.n else 6), args.p if args.p is not None else 0.95):
            print(f"{n}\t{maj}\t{percent(p)}")
        return EXIT_OK
    if args.n is None or args.p is None:
        print("liveness: need <n> and <p>, or --table", file=sys.stderr)
        return EXIT_USAGE
    try:
        p = liveness_probability(args.n, args.p)
    except DomainError as exc:
        print(f"liveness: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(percent(p))
    return EXIT_OK


def _cmd_sim_run(args) -> int:
    from ..server.node import NodeSettings
    from ..replicated_log import LogConfig
    from .runner import run_schedule
    settings = NodeSettings(log=LogConfig(batching=not args.no_batching, chaining=not args.no_chaining,
                                          multipaxos=not args.no_multipaxos))
    schedule = None
    n, writes, runs, digest = args.nodes, args.writes, args.runs, args.digest
    if args.schedule:
        from ..confparse import ParseError
        from ..transport import parse_schedule
        try:
            with open(args.schedule, encoding="utf-8") as f:
                schedule, extras = parse_schedule(f.read(), extra_top=("nodes", "writes"))
            n = int(extras.get("nodes", n))
            writes = int(extras.get("writes", writes))
        except (OSError, ParseError, ValueError) as exc:
            print(f"sim run: {exc}", file=sys.stderr)
            return EXIT_USAGE
        # a fixed schedule is one run, reported with its event-log digest
        runs, digest = 1, True
    bad = 0
    t0 = time.time()
    for seed in range(args.seed, args.seed + runs):
        rep = run_schedule(seed, schedule, n=n, writes=writes, settings=settings, keep_events=digest)
        if not rep.ok:
            bad += 1
            for v in rep.failures():
                print(f"seed {seed}: {v.name} FAILED: {v.detail}")
                for ev in v.counterexample:
                    print(f"    {ev}")
        elif args.verbose or digest:
            extra = f" digest={rep.digest:016x}" if digest else ""
            print(f"seed {seed}: ok, {rep.writes_ok} writes, t={rep.virtual_time / 1e6:.1f}s{extra}")
    print(f"{runs - bad}/{runs} schedules passed in {time.time() - t0:.1f}s")
    return EXIT_VIOLATION if bad else EXIT_OK


def _cmd_sim_explore(args) -> int:
    from .explore import ExploreConfig, explore
    t0 = time.time()
    res = explore(ExploreConfig(n=args.nodes, max_depth=args.depth, crashes=args.crashes,
                                quarantine=not args.no_quarantine))
    print(f"depth {args.depth}, crashes {args.crashes}, quarantine {'off' if args.no_quarantine else 'on'}: "
          f"{res.states} states, {res.transitions} transitions, {time.time() - t0:.1f}s")
    if res.safe:
        print("safe: no two nodes ever hold the lease at once")
        return EXIT_OK
    print("VIOLATION: two masters")
    for step in res.counterexample:
        print(f"  {step}")
    return EXIT_VIOLATION


def _cmd_sim_lease(args) -> int:
    from .lease_sim import run_lease
    bad = 0
    t0 = time.time()
    for seed in range(args.seed, args.seed + args.runs):
        r = run_lease(seed, n=args.nodes, max_skew_ppm=args.skew_ppm, quarantine=not args.no_quarantine)
        if not r.ok:
            bad += 1
            print(f"seed {seed}: {r.verdict.detail}")
    print(f"{args.runs - bad}/{args.runs} lease schedules safe in {time.time() - t0:.1f}s")
    return EXIT_VIOLATION if bad else EXIT_OK


def _cmd_bench(args) -> int:
    from .bench import BenchSpec, run_bench, standard_suite, to_csv
    specs = standard_suite(args.ops) if args.suite else [BenchSpec(
        "custom", ops=args.ops, mode=args.mode, interval=args.interval, value_size=args.value_size,
        batching=not args.no_batching, chaining=not args.no_chaining, multipaxos=not args.no_multipaxos)]
    out = to_csv([run_bench(s) for s in specs])
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(out)
    else:
        sys.stdout.write(out)
    return EXIT_OK


def _cmd_server(args) -> int:
    from dataclasses import replace
    from ..confparse import ParseError
    from ..server.config import load_config
    from ..server.runtime import run
    try:
        cfg = load_config(args.config)
    except (OSError, ParseError) as exc:
        print(f"server: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.node_id is not None:
        if not 0 <= args.node_id < len(cfg.peers):
            print(f"server: node id {args.node_id} not in cluster.nodes", file=sys.stderr)
            return EXIT_USAGE
        cfg = replace(cfg, node_id=args.node_id)
    try:
        run(cfg)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


_CLIENT_OPS = {
    "get": ("GET", 1), "dirtyget": ("GET", 1), "set": ("SET", 2), "testandset": ("TESTANDSET", 3),
    "add": ("ADD", 2), "rename": ("RENAME", 2), "delete": ("DELETE", 1), "remove": ("REMOVE", 1),
    "prune": ("PRUNE", 1), "listkeys": ("LISTKEYS", None), "listkeyvalues": ("LISTKEYVALUES", None),
    "count": ("COUNT", None),
}


def _cmd_client(args) -> int:
    from ..server import protocol as P
    from ..server.client import Client
    from ..server.config import parse_address
    try:
        nodes = [parse_address(a) for a in args.nodes.split(",")]
    except ValueError as exc:
        print(f"client: {exc}", file=sys.stderr)
        return EXIT_USAGE
    name, arity = _CLIENT_OPS[args.op]
    op = P.Op[name]
    a = [s.encode() for s in args.args]
    if arity is not None and len(a) != arity:
        print(f"client: {args.op} takes {arity} argument(s)", file=sys.stderr)
        return EXIT_USAGE
    if op == P.Op.GET:
        req = P.get(a[0], dirty=args.op == "dirtyget" or args.dirty)
    elif op in P.LIST_OPS:
        if len(a) > 2:
            print(f"client: {args.op} takes [prefix [startKey]]", file=sys.stderr)
            return EXIT_USAGE
        a += [b""] * (2 - len(a))
        req = P.listing(op, a[0], a[1], args.count, False, not args.backward, args.dirty)
    elif op == P.Op.ADD:
        try:
            req = P.write(op, a[0], P.i64_arg(int(a[1])))
        except ValueError:
            print("client: add takes an integer delta", file=sys.stderr)
            return EXIT_USAGE
    else:
        req = P.write(op, *a)
    with Client(nodes) as c:
        try:
            resp = c.request(req)
        except OSError as exc:
            print(f"client: {exc}", file=sys.stderr)
            return EXIT_FAIL
    print(resp.status.name)
    for v in resp.values:
        if op == P.Op.COUNT:
            print(int.from_bytes(v, "little"))
        else:
            print(v.decode(errors="replace"))
    return EXIT_OK if resp.status.name in ("OK", "NOT_FOUND") else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keyspace", description="Replicated key-value store and its test harness.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("server", help="run one node")
    s.add_argument("--config", required=True)
    s.add_argument("--node-id", type=int)
    s.set_defaults(fn=_cmd_server)

    c = sub.add_parser("client", help="send one request")
    c.add_argument("--nodes", required=True, help="host:port of each node's client port, comma separated")
    c.add_argument("--dirty", action="store_true")
    c.add_argument("--count", type=int, default=0, help="listing limit, 0 for none")
    c.add_argument("--backward", action="store_true")
    c.add_argument("op", choices=sorted(_CLIENT_OPS))
    c.add_argument("args", nargs="*")
    c.set_defaults(fn=_cmd_client)

    sim = sub.add_parser("sim", help="simulator").add_subparsers(dest="sim_command", required=True)
    r = sim.add_parser("run", help="randomized fault schedules with every checker")
    r.add_argument("--runs", type=int, default=100)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--nodes", type=int, default=3)
    r.add_argument("--writes", type=int, default=100)
    r.add_argument("--no-batching", action="store_true")
    r.add_argument("--no-chaining", action="store_true")
    r.add_argument("--no-multipaxos", action="store_true")
    r.add_argument("--schedule", help="fault schedule file; runs once with it")
    r.add_argument("--digest", action="store_true", help="print each run's event-log digest")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(fn=_cmd_sim_run)
    e = sim.add_parser("explore", help="exhaustive lease interleavings")
    e.add_argument("--depth", type=int, default=12)
    e.add_argument("--crashes", type=int, default=0)
    e.add_argument("--nodes", type=int, default=3)
    e.add_argument("--no-quarantine", action="store_true")
    e.set_defaults(fn=_cmd_sim_explore)
    ls = sim.add_parser("lease", help="randomized lease-only schedules")
    ls.add_argument("--runs", type=int, default=1000)
    ls.add_argument("--seed", type=int, default=0)
    ls.add_argument("--nodes", type=int, default=3)
    ls.add_argument("--skew-ppm", type=int, default=10_000)
    ls.add_argument("--no-quarantine", action="store_true")
    ls.set_defaults(fn=_cmd_sim_lease)

    lv = sub.add_parser("liveness", help="probability that a majority is alive")
    lv.add_argument("n", type=int, nargs="?")
    lv.add_argument("p", type=float, nargs="?")
    lv.add_argument("--table", action="store_true")
    lv.set_defaults(fn=_cmd_liveness)

    b = sub.add_parser("bench", help="per-instance rounds, roundtrips and syncs as CSV")
    b.add_argument("--suite", action="store_true", help="run the standard comparison set")
    b.add_argument("--ops", type=int, default=500)
    b.add_argument("--mode", choices=("stream", "burst"), default="stream")
    b.add_argument("--interval", type=int, default=20_000, help="microseconds between stream arrivals")
    b.add_argument("--value-size", type=int, default=100)
    b.add_argument("--no-batching", action="store_true")
    b.add_argument("--no-chaining", action="store_true")
    b.add_argument("--no-multipaxos", action="store_true")
    b.add_argument("--out")
    b.set_defaults(fn=_cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"keyspace: unknown log level {args.log_level}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
