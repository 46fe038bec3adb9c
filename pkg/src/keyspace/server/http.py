"""Read-only HTTP mapping of GET and dirty GET.

``/get?key=K`` and ``/dirtyget?key=K`` answer 200 with the raw value or 404.
``/master`` answers 200 with the master's id, or ``none``. A safe read that
reaches a slave is redirected (302) to the master's HTTP address when it is
known, otherwise 503. Malformed requests get 400.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from urllib.parse import parse_qs, urlsplit

from ..core import KeyspaceError, Status
from . import protocol
from .protocol import Request, Response

REASONS = {200: "OK", 302: "Found", 400: "Bad Request", 404: "Not Found", 405: "Method Not Allowed",
           500: "Internal Server Error", 503: "Service Unavailable"}


class BadRequest(KeyspaceError):
    def __init__(self, msg: str, code: int = 400) -> None:
        super().__init__(msg)
        self.code = code


@dataclass
class HttpReply:
    code: int
    body: bytes = b""
    headers: dict[str, str] = field(default_factory=dict)

    def encode(self, keep_alive: bool = False) -> bytes:
        head = [f"HTTP/1.1 {self.code} {REASONS.get(self.code, 'Unknown')}",
                f"Content-Length: {len(self.body)}",
                "Content-Type: application/octet-stream" if self.code == 200 else "Content-Type: text/plain",
                f"Connection: {'keep-alive' if keep_alive else 'close'}"]
        head += [f"{k}: {v}" for k, v in self.headers.items()]
        return ("\r\n".join(head) + "\r\n\r\n").encode("latin-1") + self.body


MASTER = "master"


def parse_target(method: str, target: str) -> Request | str:
    """A decoded GET request, or ``MASTER`` for the master query."""
    if method != "GET":
        raise BadRequest(f"method {method} not allowed", 405)
    parts = urlsplit(target)
    if parts.path == "/master":
        return MASTER
    if parts.path not in ("/get", "/dirtyget"):
        raise BadRequest(f"no such path {parts.path}", 404)
    try:
        query = parse_qs(parts.query, keep_blank_values=True, strict_parsing=True, encoding="latin-1")
    except ValueError:
        raise BadRequest("malformed query string") from None
    keys = query.get("key")
    if not keys or len(keys) != 1 or set(query) != {"key"}:
        raise BadRequest("expected exactly one key parameter")
    req = protocol.get(keys[0].encode("latin-1"), dirty=parts.path == "/dirtyget")
    try:
        protocol.validate(req)
    except KeyspaceError as exc:
        raise BadRequest(str(exc)) from None
    return req


def master_reply(master: int | None) -> HttpReply:
    return HttpReply(200, b"none" if master is None else str(master).encode())


def reply_for(resp: Response, target: str, http_peers: list[tuple[str, int]] | None = None) -> HttpReply:
    """Translate a node response to HTTP."""
    if resp.status == Status.OK:
        return HttpReply(200, resp.values[0] if resp.values else b"")
    if resp.status == Status.NOT_FOUND:
        return HttpReply(404, b"not found")
    if resp.status == Status.NOT_MASTER:
        if resp.values and http_peers:
            hint = int(resp.values[0])
            if 0 <= hint < len(http_peers):
                host, port = http_peers[hint]
                return HttpReply(302, b"", {"Location": f"http://{host}:{port}{target}"})
        return HttpReply(503, b"no master")
    if resp.status == Status.MALFORMED:
        return HttpReply(400, b"malformed")
    return HttpReply(503, resp.status.name.encode())


def parse_head(data: bytes) -> tuple[str, str, dict[str, str]]:
    """Request line and headers of one HTTP/1.x request head (without the blank line)."""
    try:
        text = data.decode("latin-1")
    except UnicodeDecodeError:  # pragma: no cover - latin-1 decodes everything
        raise BadRequest("undecodable request") from None
    lines = text.split("\r\n")
    parts = lines[0].split(" ")
    if len(parts) != 3 or not parts[2].startswith("HTTP/1."):
        raise BadRequest("malformed request line")
    headers = {}
    for line in lines[1:]:
        if not line:
            continue
        name, sep, value = line.partition(":")
        if not sep:
            raise BadRequest("malformed header")
        headers[name.strip().lower()] = value.strip()
    return parts[0], parts[1], headers
