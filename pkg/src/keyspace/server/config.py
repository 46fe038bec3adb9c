"""Node configuration files: ``key = value`` lines with ``#`` comments.

Sizes accept K/M/G suffixes. Durations accept us/ms/s suffixes; a bare
number means milliseconds. Unknown keys are rejected with their line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..confparse import ParseError, parse_duration, parse_sections, parse_size
from ..paxoslease import LeaseConfig
from ..replicated_log import LogConfig
from ..storage import StoreConfig

Address = tuple[str, int]


@dataclass
class NodeConfig:
    node_id: int = 0
    peers: list[Address] = field(default_factory=lambda: [("127.0.0.1", 7080)])
    data_dir: str = "keyspace-data"
    store: StoreConfig = field(default_factory=StoreConfig)
    lease: LeaseConfig = field(default_factory=LeaseConfig)
    log: LogConfig = field(default_factory=LogConfig)
    client_listen: Address = ("127.0.0.1", 7070)
    http_listen: Address | None = None
    # HTTP address of every node, for redirecting reads to the master
    http_peers: list[Address] = field(default_factory=list)


def parse_address(text: str) -> Address:
    host, sep, port = text.strip().rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise ValueError(f"bad address {text!r}, expected host:port")
    return host, int(port)


def _addresses(text: str) -> list[Address]:
    return [parse_address(p) for p in text.split(",") if p.strip()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"bad boolean {text!r}")


def _int(text: str) -> int:
    return int(text.strip())


def _ms(text: str) -> int:
    return parse_duration(text, "ms")


def _drift(text: str) -> float:
    t = text.strip()
    v = float(t[:-1]) / 100 if t.endswith("%") else float(t)
    if not 0 <= v < 1:
        raise ValueError(f"drift {text!r} outside [0, 1)")
    return v


# key -> (target object, attribute, value parser)
_KEYS = {
    "node.id": ("node", "node_id", _int),
    "cluster.nodes": ("node", "peers", _addresses),
    "cluster.httpNodes": ("node", "http_peers", _addresses),
    "client.listen": ("node", "client_listen", parse_address),
    "http.listen": ("node", "http_listen", parse_address),
    "database.dir": ("node", "data_dir", str.strip),
    "database.pageSize": ("store", "page_size", parse_size),
    "database.cacheSize": ("store", "cache_size", parse_size),
    "database.logBufferSize": ("store", "log_buffer_size", parse_size),
    "master.leaseTime": ("lease", "lease_time", _ms),
    "master.renewPeriod": ("lease", "renew_period", _ms),
    "master.quarantine": ("lease", "quarantine", _ms),
    "master.clockDrift": ("lease", "max_drift", _drift),
    "log.tailEntries": ("log", "tail_entries", _int),
    "log.tailBytes": ("log", "tail_bytes", parse_size),
    "log.batching": ("log", "batching", _bool),
    "log.chaining": ("log", "chaining", _bool),
    "log.multipaxos": ("log", "multipaxos", _bool),
    "log.paxosTimeout": ("log", "paxos_timeout", _ms),
}

KNOWN_KEYS = tuple(_KEYS)


def parse_config(text: str) -> NodeConfig:
    sections = parse_sections(text)
    for name, body in sections[1:]:
        line = min((ln for _, ln in body.values()), default=None)
        raise ParseError(f"sections are not allowed here: [{name}]", line)
    parts: dict[str, dict] = {"node": {}, "store": {}, "lease": {}, "log": {}}
    lines: dict[str, int] = {}
    first: dict[str, int] = {}
    for key, (value, lineno) in sections[0][1].items():
        spec = _KEYS.get(key)
        if spec is None:
            raise ParseError(f"unknown key {key!r}", lineno)
        target, attr, conv = spec
        try:
            parts[target][attr] = conv(value)
        except ValueError as exc:
            raise ParseError(f"{key}: {exc}", lineno) from None
        lines[key] = lineno
        first.setdefault(target, lineno)
    built = {}
    for target, cls in (("store", StoreConfig), ("lease", LeaseConfig), ("log", LogConfig)):
        try:
            built[target] = replace(cls(), **parts[target])
        except ValueError as exc:
            raise ParseError(str(exc), first.get(target)) from None
    cfg = NodeConfig(**parts["node"], **built)
    if not 0 <= cfg.node_id < len(cfg.peers):
        raise ParseError(f"node.id {cfg.node_id} is not an index into cluster.nodes", lines.get("node.id"))
    if cfg.http_peers and len(cfg.http_peers) != len(cfg.peers):
        raise ParseError("cluster.httpNodes must list one address per node", lines.get("cluster.httpNodes"))
    return cfg


def load_config(path: str) -> NodeConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())
