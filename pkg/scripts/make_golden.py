"""Write the wire-protocol golden fixtures under tests/golden.

The bytes are produced here with plain struct packing straight from the frame
layout, not with the package's encoder, so the fixtures are an independent
reference for it. The manifest records what each fixture means.

    python3 scripts/make_golden.py
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"

OPS = {"GET": 1, "SET": 2, "TESTANDSET": 3, "ADD": 4, "RENAME": 5, "DELETE": 6, "REMOVE": 7, "PRUNE": 8,
       "LISTKEYS": 9, "LISTKEYVALUES": 10, "COUNT": 11}
WRITES = {"SET", "TESTANDSET", "ADD", "RENAME", "DELETE", "REMOVE", "PRUNE"}
DIRTY = 0x80
STATUS = {"OK": 0, "NOT_FOUND": 1, "CONDITION_FAILED": 2, "TYPE_ERROR": 3, "NOT_MASTER": 4,
          "UNAVAILABLE": 5, "UNKNOWN_OUTCOME": 6, "MALFORMED": 7}

CID, SEQ = 0x0102030405060708, 42
LIST_ARGS = [b"user/", b"user/b", struct.pack("<Q", 10), b"\x01", b"\x00"]

# name -> (op, args)
REQUESTS = {
    "GET": ("GET", [b"user/alice"]),
    "SET": ("SET", [b"user/alice", b"hello"]),
    "TESTANDSET": ("TESTANDSET", [b"user/alice", b"hello", b"world"]),
    "ADD": ("ADD", [b"counter", struct.pack("<q", -5)]),
    "RENAME": ("RENAME", [b"user/alice", b"user/bob"]),
    "DELETE": ("DELETE", [b"user/bob"]),
    "REMOVE": ("REMOVE", [b"user/bob"]),
    "PRUNE": ("PRUNE", [b"user/"]),
    "LISTKEYS": ("LISTKEYS", LIST_ARGS),
    "LISTKEYVALUES": ("LISTKEYVALUES", LIST_ARGS),
    "COUNT": ("COUNT", LIST_ARGS),
}

# one representative response per opcode: (status, values)
RESPONSES = {
    "GET": ("OK", [b"hello"]),
    "SET": ("OK", []),
    "TESTANDSET": ("CONDITION_FAILED", [b"hello"]),
    "ADD": ("OK", [b"37"]),
    "RENAME": ("NOT_FOUND", []),
    "DELETE": ("OK", []),
    "REMOVE": ("OK", [b"world"]),
    "PRUNE": ("OK", [b"3"]),
    "LISTKEYS": ("OK", [b"user/b", b"user/c"]),
    "LISTKEYVALUES": ("OK", [b"user/b", b"1", b"user/c", b"2"]),
    "COUNT": ("OK", [struct.pack("<Q", 2)]),
    "NOT_MASTER": ("NOT_MASTER", [b"2"]),
    "UNAVAILABLE": ("UNAVAILABLE", []),
}


def blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def request_bytes(op: str, args: list[bytes], dirty: bool = False) -> bytes:
    body = bytes([OPS[op] | (DIRTY if dirty else 0)])
    if op in WRITES:
        body += struct.pack("<QQ", CID, SEQ)
    body += b"".join(blob(a) for a in args)
    return struct.pack("<I", len(body)) + body


def response_bytes(status: str, values: list[bytes]) -> bytes:
    body = bytes([STATUS[status]]) + struct.pack("<I", len(values)) + b"".join(blob(v) for v in values)
    return struct.pack("<I", len(body)) + body


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    manifest = []
    for name, (op, args) in REQUESTS.items():
        variants = [False, True] if op not in WRITES else [False]
        for dirty in variants:
            fname = f"request_{'dirty_' if dirty else ''}{name.lower()}.bin"
            (OUT / fname).write_bytes(request_bytes(op, args, dirty))
            manifest.append({"file": fname, "kind": "request", "op": op, "dirty": dirty,
                             "args": [a.hex() for a in args],
                             "client_id": CID if op in WRITES else 0, "request_seq": SEQ if op in WRITES else 0})
    for name, (status, values) in RESPONSES.items():
        fname = f"response_{name.lower()}.bin"
        (OUT / fname).write_bytes(response_bytes(status, values))
        manifest.append({"file": fname, "kind": "response", "status": status, "values": [v.hex() for v in values]})
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(manifest)} fixtures to {OUT}")


if __name__ == "__main__":
    main()
