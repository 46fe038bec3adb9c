import asyncio
import json
import socket
import threading
import time
from dataclasses import replace
from pathlib import Path

import pytest

from keyspace.core import Status
from keyspace.server import protocol as P
from keyspace.server.config import NodeConfig
from keyspace.server.protocol import Op, Request, Response
from keyspace.server.runtime import Server

GOLDEN = Path(__file__).parent / "golden"


def golden_mismatches() -> tuple[int, list[str]]:
    """Compare the encoder and decoder with every checked-in fixture."""
    manifest = json.loads((GOLDEN / "manifest.json").read_text())
    bad = []
    for entry in manifest:
        want = (GOLDEN / entry["file"]).read_bytes()
        if entry["kind"] == "request":
            op = Op[entry["op"]] | (P.DIRTY if entry["dirty"] else 0)
            obj = Request(op, tuple(bytes.fromhex(a) for a in entry["args"]), entry["client_id"],
                          entry["request_seq"])
            got = P.encode_request(obj)
            back = P.decode_request_body(want[4:])
        else:
            obj = Response(Status[entry["status"]], tuple(bytes.fromhex(v) for v in entry["values"]))
            got = P.encode_response(obj)
            back = P.decode_response_body(want[4:])
        if got != want or back != obj:
            bad.append(entry["file"])
    return len(manifest), bad


def free_ports(k: int) -> list[int]:
    socks = [socket.socket() for _ in range(k)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


class LiveCluster:
    """Real servers on loopback, run on an event loop in a background thread."""

    def __init__(self, root: Path, n: int = 3, http: bool = False) -> None:
        ports = free_ports(3 * n)
        peers = [("127.0.0.1", p) for p in ports[:n]]
        self.client_addrs = [("127.0.0.1", p) for p in ports[n:2 * n]]
        self.http_addrs = [("127.0.0.1", p) for p in ports[2 * n:]] if http else []
        base = NodeConfig()
        lease = replace(base.lease, lease_time=1_000_000, renew_period=300_000, quarantine=0,
                        attempt_timeout=200_000)
        # a short idle flush keeps lone writes from waiting out the default deferral
        logc = replace(base.log, idle_flush=2_000)
        self.configs = [
            NodeConfig(node_id=i, peers=peers, data_dir=str(root / f"node{i}"), lease=lease, log=logc,
                       client_listen=self.client_addrs[i],
                       http_listen=self.http_addrs[i] if http else None, http_peers=self.http_addrs)
            for i in range(n)]
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)
        self.servers: list[Server] = []

    def call(self, coro, timeout=10):
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def start(self) -> "LiveCluster":
        self.thread.start()
        for cfg in self.configs:
            s = Server(cfg)
            self.call(s.start())
            self.servers.append(s)
        return self

    def master(self) -> int | None:
        for i, s in enumerate(self.servers):
            if s.node is not None and s.node.lease.is_master() and s.node.log.ready:
                return i
        return None

    def wait_master(self, timeout: float = 20.0) -> int:
        deadline = time.time() + timeout
        while time.time() < deadline:
            m = self.master()
            # every node must also have heard of it, so redirects have a target
            if m is not None and all(s.node.lease.current_master() == m for s in self.servers):
                return m
            time.sleep(0.05)
        raise TimeoutError("no master elected")

    def stop(self) -> None:
        for s in self.servers:
            try:
                self.call(s.stop())
            except Exception:
                pass
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(5)


@pytest.fixture
def live_cluster(tmp_path):
    c = LiveCluster(tmp_path, http=True).start()
    try:
        c.wait_master()
        yield c
    finally:
        c.stop()


# --- acceptance report: one line per criterion at the end of the run

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {num:2d}. {name}: {detail}")
