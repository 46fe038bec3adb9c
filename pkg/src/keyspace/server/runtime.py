"""Run a node for real: asyncio event loop, files on disk, UDP and TCP.

Everything that touches node state runs on the loop thread. Only fsync is
handed to a single worker thread, so flushes still complete in order.
"""

from __future__ import annotations

import asyncio
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor

from ..core import KeyspaceError, Malformed, Status
from ..storage import FileDisk, Store
from ..transport import ConnectionLost, Delivered, Envelope, NetworkTransport
from . import http, protocol
from .config import NodeConfig
from .node import Node, NodeSettings
from .protocol import FrameDecoder, Response

log = logging.getLogger(__name__)


class AsyncEnv:
    """The node's view of the outside world on an asyncio loop."""

    def __init__(self, node_id: int, loop: asyncio.AbstractEventLoop) -> None:
        self.node_id = node_id
        self.loop = loop
        self.rng = random.Random()
        # tags this boot's lease requests apart from any earlier run
        self.epoch = int(time.time())
        self.transport: NetworkTransport | None = None
        self.node: Node | None = None
        self._timers: dict[str, asyncio.TimerHandle] = {}

    def now(self) -> int:
        return time.monotonic_ns() // 1000

    def send(self, dst: int, channel, payload: bytes) -> None:
        self.transport.send(Envelope(self.node_id, dst, channel, payload))

    def set_timer(self, key: str, delay: int) -> None:
        self.cancel_timer(key)
        self._timers[key] = self.loop.call_later(delay / 1e6, self._fire, key)

    def cancel_timer(self, key: str) -> None:
        h = self._timers.pop(key, None)
        if h is not None:
            h.cancel()

    def _fire(self, key: str) -> None:
        self._timers.pop(key, None)
        self.node.on_timer(key)

    def record(self, kind: str, *fields) -> None:
        log.debug("%s %s", kind, fields)

    def on_transport(self, ev) -> None:
        # transport callbacks already run on the loop thread
        if isinstance(ev, Delivered):
            self.node.on_message(ev.envelope.src, ev.envelope.payload)
        elif isinstance(ev, ConnectionLost):
            self.node.on_connection_lost(ev.peer)

    def close(self) -> None:
        for h in self._timers.values():
            h.cancel()
        self._timers.clear()


class Server:
    def __init__(self, config: NodeConfig) -> None:
        self.config = config
        self.env: AsyncEnv | None = None
        self.node: Node | None = None
        self._servers: list[asyncio.base_events.Server] = []
        self._sessions: set[asyncio.Task] = set()
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="fsync")

    async def start(self) -> None:
        cfg = self.config
        loop = asyncio.get_running_loop()

        def run_blocking(work, done) -> None:
            fut = loop.run_in_executor(self._pool, work)
            fut.add_done_callback(lambda f: self._flushed(f, done))

        disk = FileDisk(cfg.data_dir, run_blocking)
        store = Store(disk, cfg.store)
        env = self.env = AsyncEnv(cfg.node_id, loop)
        # lease state is never persisted, so every boot is treated as a restart
        node = self.node = Node(env, cfg.node_id, len(cfg.peers), store,
                                NodeSettings(lease=cfg.lease, log=cfg.log), restarted=True)
        env.node = node
        env.transport = NetworkTransport(cfg.node_id, cfg.peers, env.on_transport, env.now)
        await env.transport.start()
        node.start()
        host, port = cfg.client_listen
        self._servers.append(await asyncio.start_server(self._session(self._serve_client), host, port))
        if cfg.http_listen is not None:
            host, port = cfg.http_listen
            self._servers.append(await asyncio.start_server(self._session(self._serve_http), host, port))
        log.info("node %d up: peers %s, clients on %s", cfg.node_id, cfg.peers, cfg.client_listen)

    def _session(self, handler):
        """Wrap a connection handler so ``stop`` can cancel open connections."""
        async def run(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
            task = asyncio.current_task()
            self._sessions.add(task)
            try:
                await handler(reader, writer)
            except asyncio.CancelledError:
                writer.close()
            finally:
                self._sessions.discard(task)
        return run

    def _flushed(self, fut, done) -> None:
        exc = fut.exception()
        if exc is not None:
            log.error("fsync failed: %s", exc)
            return
        done()

    async def stop(self) -> None:
        for s in self._servers:
            s.close()
        sessions = list(self._sessions)
        for t in sessions:
            t.cancel()
        await asyncio.gather(*sessions, return_exceptions=True)
        for s in self._servers:
            await s.wait_closed()
        if self.env is not None:
            self.env.close()
            if self.env.transport is not None:
                await self.env.transport.stop()
        if self.node is not None:
            self.node.crash()
            self.node.store.disk.close()
        self._pool.shutdown(wait=True)

    async def serve_forever(self) -> None:
        await self.start()
        try:
            await asyncio.Event().wait()
        finally:
            await self.stop()

    # --- client protocol

    async def _serve_client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        frames = FrameDecoder()
        # responses go out in request order even when a later read finishes first
        slots: list[bytes | None] = []
        head = [0]
        closing = [False]

        def flush() -> None:
            while slots and slots[0] is not None:
                writer.write(slots.pop(0))
                head[0] += 1
            if closing[0] and not slots:
                writer.close()

        def slot_reply(index: int):
            def reply(resp: Response) -> None:
                if writer.is_closing():
                    return
                slots[index - head[0]] = protocol.encode_response(resp)
                flush()
            return reply

        try:
            while not closing[0]:
                data = await reader.read(65536)
                if not data:
                    break
                try:
                    bodies = frames.feed(data)
                except Malformed:
                    slots.append(protocol.encode_response(Response(Status.MALFORMED)))
                    closing[0] = True
                    flush()
                    break
                for body in bodies:
                    index = head[0] + len(slots)
                    slots.append(None)
                    try:
                        req = protocol.decode_request_body(body)
                    except KeyspaceError:
                        slots[-1] = protocol.encode_response(Response(Status.MALFORMED))
                        closing[0] = True
                        flush()
                        break
                    self.node.handle(req, slot_reply(index))
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            if not closing[0]:
                writer.close()

    # --- HTTP

    async def _serve_http(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                try:
                    head = await reader.readuntil(b"\r\n\r\n")
                except asyncio.LimitOverrunError:
                    writer.write(http.HttpReply(400, b"request too large").encode())
                    break
                try:
                    method, target, headers = http.parse_head(head[:-4])
                    parsed = http.parse_target(method, target)
                except http.BadRequest as exc:
                    writer.write(http.HttpReply(exc.code, str(exc).encode()).encode())
                    break
                keep = headers.get("connection", "").lower() == "keep-alive"
                if parsed == http.MASTER:
                    reply = http.master_reply(self.node.lease.current_master())
                else:
                    fut = asyncio.get_running_loop().create_future()
                    self.node.handle(parsed, lambda r: fut.done() or fut.set_result(r))
                    reply = http.reply_for(await fut, target, self.config.http_peers)
                writer.write(reply.encode(keep))
                await writer.drain()
                if not keep:
                    break
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()


def run(config: NodeConfig) -> None:
    asyncio.run(Server(config).serve_forever())
