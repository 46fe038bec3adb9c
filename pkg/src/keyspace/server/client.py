"""Blocking client for the wire protocol.

Writes carry a random client id and an increasing request sequence number,
kept across retries, so a retried write that already committed is not
applied twice. NOT_MASTER replies are followed to the hinted node.
"""

from __future__ import annotations

import random
import socket
import struct
import time

from ..core import KeyspaceError, Malformed, Status
from . import protocol
from .protocol import Op, Request, Response

_U32 = struct.Struct("<I")


class ClientError(KeyspaceError):
    def __init__(self, response: Response) -> None:
        super().__init__(response.status.name)
        self.response = response


class Connection:
    """One TCP connection to one node."""

    def __init__(self, address: tuple[str, int], timeout: float = 5.0) -> None:
        self.sock = socket.create_connection(address, timeout=timeout)

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("connection closed")
            buf += chunk
        return bytes(buf)

    def call(self, req: Request) -> Response:
        self.sock.sendall(protocol.encode_request(req))
        (n,) = _U32.unpack(self._read_exact(4))
        if n > protocol.MAX_FRAME:
            raise Malformed(f"response frame of {n} bytes")
        return protocol.decode_response_body(self._read_exact(n))

    def close(self) -> None:
        self.sock.close()


class Client:
    RETRY = {Status.NOT_MASTER, Status.UNAVAILABLE, Status.UNKNOWN_OUTCOME}

    def __init__(self, nodes: list[tuple[str, int]], timeout: float = 5.0, attempts: int = 20,
                 backoff: float = 0.2) -> None:
        self.nodes = nodes
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.client_id = random.getrandbits(63) or 1
        self.seq = 0
        self.target = 0
        self._conns: dict[int, Connection] = {}

    def close(self) -> None:
        for c in self._conns.values():
            c.close()
        self._conns.clear()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _conn(self, i: int) -> Connection:
        c = self._conns.get(i)
        if c is None:
            c = self._conns[i] = Connection(self.nodes[i], self.timeout)
        return c

    def request(self, req: Request) -> Response:
        """Send with retries; returns the first non-retryable response."""
        if req.base in protocol.WRITE_OPS and req.request_seq == 0:
            self.seq += 1
            req = Request(req.op, req.args, self.client_id, self.seq)
        resp = Response(Status.UNAVAILABLE)
        for _ in range(self.attempts):
            try:
                resp = self._conn(self.target).call(req)
            except (OSError, ConnectionError, Malformed):
                c = self._conns.pop(self.target, None)
                if c is not None:
                    c.close()
                self.target = (self.target + 1) % len(self.nodes)
                time.sleep(self.backoff)
                continue
            if req.dirty or resp.status not in self.RETRY:
                return resp
            if resp.status == Status.NOT_MASTER and resp.values:
                hint = int(resp.values[0])
                if 0 <= hint < len(self.nodes) and hint != self.target:
                    self.target = hint
                    continue
            time.sleep(self.backoff)
            self.target = random.randrange(len(self.nodes))
        return resp

    # convenience wrappers

    def get(self, key: bytes, dirty: bool = False) -> bytes | None:
        resp = self.request(protocol.get(key, dirty))
        if resp.status == Status.NOT_FOUND:
            return None
        if resp.status != Status.OK:
            raise ClientError(resp)
        return resp.values[0]

    def write(self, op: Op, *args: bytes) -> Response:
        return self.request(protocol.write(op, *args))

    def set(self, key: bytes, value: bytes) -> None:
        resp = self.write(Op.SET, key, value)
        if resp.status != Status.OK:
            raise ClientError(resp)
