"""``brokerd``: one broker node on real sockets.

A single asyncio loop owns the :class:`Broker`; connection handlers talk to
it only by calling into that loop, so the broker itself never sees threads.
An inbound connection is classified by its first byte: ``0xFD`` opens a
binary feed, a letter or digit a text feed, anything else is the broker
wire protocol (whose first byte is the high byte of a frame length).
"""

from __future__ import annotations

import argparse
import asyncio
import itertools
import logging
import signal
import sys
import time
from typing import Optional

from ..broker import Broker, BrokerError, Session
from ..feedpipe import FeedConfig, FeedReject, parse_binary_frame, parse_text_line
from ..model import FRAME_MAGIC, MalformedFrame, Subscription
from ..plant import TickerPlant
from ..store import EventStore
from ..wire import (
    Credit,
    FrameDecoder,
    Hello,
    Message,
    PeerKind,
    ProtocolError,
    Publish,
    Subscribe,
    Unsubscribe,
    encode_message,
)
from .common import EXIT_FAILURE, EXIT_OK, add_verbosity, guarded, parse_addr, parse_or_exit, setup_logging

log = logging.getLogger("tickermesh.brokerd")

PUMP_MS = 10
REDIAL_MS = 1_000
READ_CHUNK = 65536


def wall_ms() -> int:
    return int(time.time() * 1000)


class _Net:
    """What the broker needs from its surroundings: a clock, timers, neighbour sends."""

    def __init__(self, loop: asyncio.AbstractEventLoop):
        self.loop = loop
        self.peers: dict[str, asyncio.StreamWriter] = {}

    def now(self) -> int:
        return wall_ms()

    def send(self, peer: str, msg: Message) -> None:
        w = self.peers.get(peer)
        if w is not None and not w.is_closing():
            w.write(encode_message(msg))

    def call_later(self, delay_ms: int, fn) -> None:
        self.loop.call_later(delay_ms / 1000, _safely, fn)


def _safely(fn) -> None:
    try:
        fn()
    except Exception:
        log.exception("timer callback failed")


class _Client:
    def __init__(self, session: Session, writer: asyncio.StreamWriter):
        self.session = session
        self.writer = writer
        self.window = 0  # frames the client has room for


class BrokerDaemon:
    def __init__(self, node_id: str, site: str, listen: tuple[str, int], peers: list[tuple[str, int]],
                 store_dir: Optional[str] = None):
        self.node_id = node_id
        self.site = site
        self.listen = listen
        self.peer_addrs = peers
        self.store_dir = store_dir
        self.broker: Optional[Broker] = None
        self.net: Optional[_Net] = None
        self.clients: dict[int, _Client] = {}
        self.server: Optional[asyncio.base_events.Server] = None
        self.port: Optional[int] = None
        self._feed_ids = itertools.count(1)
        self._tasks: list[asyncio.Task] = []
        self._stopping = asyncio.Event()

    # -- lifecycle ---------------------------------------------------------------

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self.net = _Net(loop)
        store = EventStore(self.store_dir) if self.store_dir else None
        self.broker = Broker(self.node_id, self.site, self.net, store=store)
        self.broker.start()
        host, port = self.listen
        self.server = await asyncio.start_server(self._accept, host, port)
        self.port = self.server.sockets[0].getsockname()[1]
        log.info("%s listening on %s:%d", self.node_id, host, self.port)
        for addr in self.peer_addrs:
            self._tasks.append(asyncio.create_task(self._dial(addr)))
        self._tasks.append(asyncio.create_task(self._pump_loop()))

    async def stop(self) -> None:
        self._stopping.set()
        for t in self._tasks:
            t.cancel()
        if self.server is not None:
            self.server.close()
        for w in list(self.net.peers.values()) + [c.writer for c in self.clients.values()]:
            w.close()
        if self.broker is not None:
            self.broker.stop()

    async def serve_forever(self) -> None:
        await self.start()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, self._stopping.set)
            except (NotImplementedError, RuntimeError):
                pass
        await self._stopping.wait()
        await self.stop()

    # -- delivery to clients -----------------------------------------------------

    def pump(self) -> None:
        for c in list(self.clients.values()):
            s = c.session
            if c.window <= 0 or not s.pending or c.writer.is_closing():
                continue
            items = self.broker.drain(s, min(c.window, s.pending))
            c.window -= len(items)
            c.writer.write(b"".join(encode_message(Publish(n)) for n in items))

    async def _pump_loop(self) -> None:
        while True:
            await asyncio.sleep(PUMP_MS / 1000)
            self.pump()

    # -- connections ---------------------------------------------------------------

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            first = await reader.read(1)
            if not first:
                return
            b = first[0]
            if b == FRAME_MAGIC:
                await self._feed(reader, first, binary=True)
            elif chr(b).isalnum() and b < 0x80:
                await self._feed(reader, first, binary=False)
            else:
                await self._wire(reader, writer, first, dialed=False)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        except ProtocolError as exc:
            log.warning("dropping connection: %s", exc)
        finally:
            writer.close()

    async def _dial(self, addr: tuple[str, int]) -> None:
        host, port = addr
        while True:
            try:
                reader, writer = await asyncio.open_connection(host, port)
            except OSError as exc:
                log.info("dial %s:%d failed: %s", host, port, exc)
                await asyncio.sleep(REDIAL_MS / 1000)
                continue
            writer.write(encode_message(Hello(self.node_id, PeerKind.NEIGHBOR_BROKER, self.site)))
            try:
                await self._wire(reader, writer, b"", dialed=True)
            except (ConnectionError, asyncio.IncompleteReadError):
                pass
            except ProtocolError as exc:
                log.warning("peer %s:%d: %s", host, port, exc)
            finally:
                writer.close()
            await asyncio.sleep(REDIAL_MS / 1000)

    async def _wire(self, reader, writer, first: bytes, dialed: bool) -> None:
        decoder = FrameDecoder()
        pending = decoder.feed(first)
        while not pending:
            data = await reader.read(READ_CHUNK)
            if not data:
                return
            pending = decoder.feed(data)
        hello = pending.pop(0)
        if not isinstance(hello, Hello):
            raise ProtocolError(f"expected HELLO, got {type(hello).__name__}")
        if hello.kind is PeerKind.NEIGHBOR_BROKER:
            await self._neighbor(reader, writer, decoder, hello, pending, dialed)
        else:
            await self._client(reader, writer, decoder, hello, pending)

    async def _neighbor(self, reader, writer, decoder, hello: Hello, pending: list, dialed: bool) -> None:
        peer = hello.node_id
        old = self.net.peers.get(peer)
        if old is not None and old is not writer:
            old.close()
        self.net.peers[peer] = writer
        broker = self.broker
        if dialed:
            broker.connect(peer, hello_sent=True)
        log.info("%s: neighbour %s connected", self.node_id, peer)
        try:
            for msg in [hello, *pending]:
                broker.receive(peer, msg)
            while True:
                data = await reader.read(READ_CHUNK)
                if not data:
                    break
                for msg in decoder.feed(data):
                    broker.receive(peer, msg)
                self.pump()
        finally:
            if self.net.peers.get(peer) is writer:
                del self.net.peers[peer]
                broker.disconnect(peer)
                log.info("%s: neighbour %s gone", self.node_id, peer)

    async def _client(self, reader, writer, decoder, hello: Hello, pending: list) -> None:
        broker = self.broker
        session = broker.open_session(hello.kind)
        client = self.clients[session.session_id] = _Client(session, writer)
        try:
            msgs = pending
            while True:
                for msg in msgs:
                    self._client_msg(client, msg)
                self.pump()
                data = await reader.read(READ_CHUNK)
                if not data:
                    break
                msgs = decoder.feed(data)
        finally:
            self.clients.pop(session.session_id, None)
            broker.close_session(session)

    def _client_msg(self, client: _Client, msg: Message) -> None:
        if isinstance(msg, Subscribe):
            try:
                self.broker.subscribe(client.session, Subscription(msg.sub_id, msg.filter, msg.qoi))
            except BrokerError as exc:
                log.warning("subscribe rejected: %s", exc)
        elif isinstance(msg, Unsubscribe):
            try:
                self.broker.unsubscribe(client.session, msg.sub_id)
            except BrokerError as exc:
                log.warning("unsubscribe rejected: %s", exc)
        elif isinstance(msg, Credit):
            client.window += msg.n
        elif isinstance(msg, Publish) and client.session.peer_kind is PeerKind.FEED:
            self.broker.publish(msg.notification)
        else:
            log.debug("ignoring %s from client %d", type(msg).__name__, client.session.session_id)

    async def _feed(self, reader: asyncio.StreamReader, first: bytes, binary: bool) -> None:
        feed_id = f"{self.node_id}-feed{next(self._feed_ids)}"
        plant: Optional[TickerPlant] = None
        buf = bytearray(first)
        while True:
            while self.broker.backpressured:
                # a COMPLETE consumer here is behind: stop reading, let TCP push back
                await asyncio.sleep(PUMP_MS / 1000)
                self.pump()
            data = await reader.read(READ_CHUNK)
            buf += data
            records, used = (_split_binary if binary else _split_text)(buf, final=not data)
            del buf[:used]
            now = wall_ms()
            for rec in records:
                if plant is None:
                    source = _peek_source(rec, binary)
                    if source is None:
                        continue
                    plant = TickerPlant(FeedConfig(feed_id, source))
                    log.info("%s carries source %s", feed_id, source)
                got = plant.feed_binary(rec, now) if binary else [plant.feed_line(rec, now)]
                for n in got:
                    if n is not None:
                        self.broker.publish(n)
            self.pump()
            if not data:
                break
        if plant is not None:
            st = plant.stats
            log.info("%s closed: parsed %d accepted %d rejected %d", feed_id, st.parsed, st.accepted,
                     sum(st.rejected.values()))


def _split_text(buf: bytearray, final: bool) -> tuple[list[str], int]:
    end = buf.rfind(b"\n") + 1
    if final:
        end = len(buf)
    text = buf[:end].decode("ascii", errors="replace")
    return [l.rstrip("\r") for l in text.split("\n") if l.strip()], end


def _split_binary(buf: bytearray, final: bool) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(buf) - pos >= 4:
        if buf[pos] != FRAME_MAGIC:
            nxt = buf.find(bytes([FRAME_MAGIC]), pos + 1)
            out.append(bytes(buf[pos : nxt if nxt >= 0 else len(buf)]))  # counted as a reject
            pos = nxt if nxt >= 0 else len(buf)
            continue
        length = int.from_bytes(buf[pos + 2 : pos + 4], "big")
        if len(buf) - pos < 4 + length:
            break
        out.append(bytes(buf[pos : pos + 4 + length]))
        pos += 4 + length
    if final and pos < len(buf):
        out.append(bytes(buf[pos:]))
        pos = len(buf)
    return out, pos


def _peek_source(rec, binary: bool) -> Optional[str]:
    try:
        return parse_binary_frame(rec)[0].source if binary else parse_text_line(rec).source
    except (FeedReject, MalformedFrame):
        return None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brokerd", description="Run one pub/sub broker node.")
    p.add_argument("--id", required=True, help="broker name, unique in the mesh")
    p.add_argument("--site", required=True)
    p.add_argument("--listen", required=True, type=parse_addr, metavar="ADDR:PORT")
    p.add_argument("--peer", action="append", default=[], type=parse_addr, metavar="ADDR:PORT",
                   help="neighbour to dial (repeatable)")
    p.add_argument("--store", metavar="DIR", help="persist published notifications here")
    add_verbosity(p)
    return p


@guarded
def run_brokerd(argv=None) -> int:
    args = parse_or_exit(build_parser(), argv)
    setup_logging(args.verbose)
    daemon = BrokerDaemon(args.id, args.site, args.listen, args.peer, args.store)
    try:
        asyncio.run(daemon.serve_forever())
    except OSError as exc:
        print(f"brokerd: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(run_brokerd())
