"""Framing and the two transports: real TCP sockets and a deterministic
in-process network simulator.

Every message travels as a frame: a 4-byte big-endian length followed by that
many payload bytes, capped at 1 MiB.  The simulator numbers frames globally in
transmission order (the first frame of a run is 1) and applies configured
faults by frame index: drop, duplicate, swap, single-bit flip over the full
wire image (header included), and delayed delivery measured in clock ticks.

Time in the simulator is a logical tick counter shared by every endpoint, so
runs are reproducible; the threaded TCP server uses the real clock and keeps
the same session interface.  A session object consumes one request payload at
a time via ``feed(payload, now) -> (replies, close)``.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .errors import (
    ConnectionClosed,
    FrameError,
    FrameTooLarge,
    ScenarioParseError,
    Timeout,
)

MAX_FRAME = 1 << 20
DEFAULT_RECV_TIMEOUT = 30
SIM_CLOCK_START = 1_000_000

_LEN = struct.Struct(">I")


def pack_frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(payload)) + payload


def unpack_frame(wire: bytes) -> bytes:
    """Split a complete wire image back into its payload."""
    if len(wire) < _LEN.size:
        raise FrameError("frame shorter than its length header")
    (length,) = _LEN.unpack_from(wire)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame header claims {length} bytes")
    if len(wire) - _LEN.size != length:
        raise FrameError(f"frame header claims {length} bytes, carried {len(wire) - _LEN.size}")
    return wire[_LEN.size:]


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(pack_frame(payload))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise Timeout("timed out waiting for frame data") from None
        if not chunk:
            raise ConnectionClosed("peer closed the connection mid-frame"
                                   if buf else "peer closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket, timeout: Optional[float] = None) -> bytes:
    if timeout is not None:
        sock.settimeout(timeout)
    header = _recv_exact(sock, _LEN.size)
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame header claims {length} bytes")
    return _recv_exact(sock, length)


class SimClock:
    """Logical tick counter; never moves unless something advances it."""

    def __init__(self, start: int = SIM_CLOCK_START):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance(self, ticks: int) -> int:
        if ticks < 0:
            raise ValueError("clock only moves forward")
        self._now += ticks
        return self._now


# ---------------------------------------------------------------------------
# fault descriptions


@dataclass(frozen=True)
class Drop:
    frame: int


@dataclass(frozen=True)
class Duplicate:
    frame: int


@dataclass(frozen=True)
class Swap:
    first: int
    second: int


@dataclass(frozen=True)
class FlipBit:
    frame: int
    byte: int
    bit: int


@dataclass(frozen=True)
class Delay:
    frame: int
    ticks: int


Fault = Union[Drop, Duplicate, Swap, FlipBit, Delay]


def parse_fault(tokens: list[str]) -> Fault:
    """Parse the word list after the ``fault`` keyword of a scenario line."""
    def arg(i: int, what: str) -> int:
        try:
            value = int(tokens[i])
        except (IndexError, ValueError):
            raise ScenarioParseError(f"fault {tokens[0]}: expected integer {what}") from None
        if value < 0:
            raise ScenarioParseError(f"fault {tokens[0]}: {what} must be non-negative")
        return value

    if not tokens:
        raise ScenarioParseError("empty fault specification")
    kind, extra = tokens[0], None
    if kind == "drop":
        fault, extra = Drop(arg(1, "frame")), 2
    elif kind == "dup":
        fault, extra = Duplicate(arg(1, "frame")), 2
    elif kind == "swap":
        fault, extra = Swap(arg(1, "first frame"), arg(2, "second frame")), 3
    elif kind == "flip":
        fault, extra = FlipBit(arg(1, "frame"), arg(2, "byte"), arg(3, "bit")), 4
    elif kind == "delay":
        fault, extra = Delay(arg(1, "frame"), arg(2, "ticks")), 3
    else:
        raise ScenarioParseError(f"unknown fault kind {kind!r}")
    if len(tokens) != extra:
        raise ScenarioParseError(f"fault {kind}: trailing arguments {tokens[extra:]}")
    return fault


@dataclass
class FrameRecord:
    """One transmission in the simulator's transcript."""
    index: int
    channel: str
    internal: bool
    direction: str          # "c->s" or "s->c"
    wire: bytes             # image as (possibly) corrupted by faults
    tick: int
    status: str             # delivered | dropped | held | duplicate | stale
    note: str = ""


class SimConnection:
    """Client end of one simulated connection."""

    def __init__(self, network: "SimNetwork", channel: str, internal: bool, session):
        self.network = network
        self.channel = channel
        self.internal = internal
        self.session = session
        self.inbox: list[bytes] = []    # wire images awaiting client recv
        self.server_closed = False
        self.client_closed = False

    def send(self, payload: bytes) -> None:
        if self.client_closed:
            raise ConnectionClosed("connection already closed by this side")
        self.network._transmit(self, "c->s", pack_frame(payload))

    def recv(self, timeout: int = DEFAULT_RECV_TIMEOUT) -> bytes:
        if self.client_closed:
            raise ConnectionClosed("connection already closed by this side")
        wire = self.network._await_frame(self, timeout)
        return unpack_frame(wire)

    def close(self) -> None:
        self.client_closed = True
        self.network._forget(self)


class SimNetwork:
    """Deterministic lockstep switch between client steps and server sessions.

    ``connect`` instantiates a fresh session from the factory registered for
    the address, mirroring one TCP connection per exchange.  Sends run the
    whole request/reply cycle synchronously unless a fault holds a frame back.
    """

    def __init__(self, clock: SimClock, faults: tuple[Fault, ...] = ()):
        self.clock = clock
        self.transcript: list[FrameRecord] = []
        self._factories: dict[str, Callable[[], object]] = {}
        self._counter = 0
        self._drops: set[int] = set()
        self._dups: set[int] = set()
        self._delays: dict[int, int] = {}
        self._flips: dict[int, list[FlipBit]] = {}
        self._swap_hold: dict[int, int] = {}    # frame to hold -> release trigger
        self._held: dict[int, tuple] = {}       # trigger -> (record, conn, direction)
        self._pending: list[tuple[int, FrameRecord, SimConnection, str]] = []
        for fault in faults:
            self.add_fault(fault)

    def add_fault(self, fault: Fault) -> None:
        if isinstance(fault, Drop):
            self._drops.add(fault.frame)
        elif isinstance(fault, Duplicate):
            self._dups.add(fault.frame)
        elif isinstance(fault, Swap):
            self._swap_hold[fault.first] = fault.second
        elif isinstance(fault, FlipBit):
            self._flips.setdefault(fault.frame, []).append(fault)
        elif isinstance(fault, Delay):
            self._delays[fault.frame] = fault.ticks
        else:
            raise TypeError(f"not a fault: {fault!r}")

    def register(self, address: str, factory: Callable[[], object]) -> None:
        self._factories[address] = factory

    def connect(self, address: str, channel: str, internal: bool = False) -> SimConnection:
        try:
            factory = self._factories[address]
        except KeyError:
            raise ConnectionClosed(f"nothing listens at {address!r}") from None
        return SimConnection(self, channel, internal, factory())

    # -- internals ----------------------------------------------------------

    def _transmit(self, conn: SimConnection, direction: str, wire: bytes) -> None:
        self._counter += 1
        index = self._counter
        record = FrameRecord(index, conn.channel, conn.internal, direction,
                             wire, self.clock.now(), "delivered")
        for flip in self._flips.get(index, ()):
            if flip.byte < len(wire):
                mutated = bytearray(wire)
                mutated[flip.byte] ^= 1 << (flip.bit & 7)
                wire = bytes(mutated)
                record.wire = wire
                record.note = f"flipped byte {flip.byte} bit {flip.bit & 7}"
        if index in self._drops:
            record.status = "dropped"
            self.transcript.append(record)
            self._release_if_triggered(index)
            return
        if index in self._swap_hold:
            record.status = "held"
            self.transcript.append(record)
            self._held[self._swap_hold[index]] = (record, conn, direction)
            return
        if index in self._delays:
            ready = self.clock.now() + self._delays[index]
            record.note = (record.note + " " if record.note else "") + f"delayed to tick {ready}"
            self.transcript.append(record)
            self._pending.append((ready, record, conn, direction))
            self._release_if_triggered(index)
            return
        self.transcript.append(record)
        self._deliver(record, conn, direction)
        if index in self._dups:
            copy = FrameRecord(index, conn.channel, conn.internal, direction,
                               wire, self.clock.now(), "duplicate", "replayed copy")
            self.transcript.append(copy)
            self._deliver(copy, conn, direction)
        self._release_if_triggered(index)

    def _release_if_triggered(self, index: int) -> None:
        held = self._held.pop(index, None)
        if held is not None:
            record, conn, direction = held
            release = FrameRecord(record.index, record.channel, record.internal,
                                  direction, record.wire, self.clock.now(),
                                  "delivered", "released after swap")
            self.transcript.append(release)
            self._deliver(release, conn, direction)

    def _deliver(self, record: FrameRecord, conn: SimConnection, direction: str) -> None:
        if direction == "s->c":
            conn.inbox.append(record.wire)
            return
        if conn.server_closed:
            record.status = "stale"
            record.note = (record.note + " " if record.note else "") + "server side closed"
            return
        try:
            payload = unpack_frame(record.wire)
        except (FrameError, FrameTooLarge) as exc:
            # a mangled frame kills the connection after one error report
            from . import codec
            from .messages import ErrorReply
            conn.server_closed = True
            self._transmit(conn, "s->c", pack_frame(
                codec.encode(ErrorReply(exc.name, str(exc)))))
            return
        replies, close = conn.session.feed(payload, self.clock.now())
        for reply in replies:
            self._transmit(conn, "s->c", pack_frame(reply))
        if close:
            conn.server_closed = True

    def _pump(self) -> None:
        now = self.clock.now()
        due = [item for item in self._pending if item[0] <= now]
        if not due:
            return
        self._pending = [item for item in self._pending if item[0] > now]
        for _, record, conn, direction in sorted(due, key=lambda item: (item[0], item[1].index)):
            release = FrameRecord(record.index, record.channel, record.internal,
                                  direction, record.wire, now, "delivered",
                                  "released after delay")
            self.transcript.append(release)
            self._deliver(release, conn, direction)

    def _await_frame(self, conn: SimConnection, timeout: int) -> bytes:
        deadline = self.clock.now() + timeout
        while True:
            self._pump()
            if conn.inbox:
                return conn.inbox.pop(0)
            if conn.server_closed:
                raise ConnectionClosed("server side closed the connection")
            upcoming = [ready for ready, *_ in self._pending if ready <= deadline]
            if not upcoming:
                self.clock.advance(max(0, deadline - self.clock.now()))
                raise Timeout(f"no frame within {timeout} ticks")
            self.clock.advance(min(upcoming) - self.clock.now())

    def _forget(self, conn: SimConnection) -> None:
        self._pending = [item for item in self._pending if item[2] is not conn]


class ThreadedFrameServer:
    """Real-socket counterpart: one thread per connection, same sessions."""

    def __init__(self, session_factory: Callable[[], object],
                 now_fn: Callable[[], int] = lambda: int(time.time()),
                 host: str = "127.0.0.1", port: int = 0):
        self.session_factory = session_factory
        self.now_fn = now_fn
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self._sock.settimeout(0.1)  # so the accept loop can poll the stop flag
        self.host, self.port = self._sock.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread: Optional[threading.Thread] = None

    def start(self) -> "ThreadedFrameServer":
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            worker = threading.Thread(target=self._serve_one, args=(client,), daemon=True)
            worker.start()
            self._threads.append(worker)

    def _serve_one(self, client: socket.socket) -> None:
        from . import codec
        from .messages import ErrorReply

        session = self.session_factory()
        with client:
            while not self._stop.is_set():
                try:
                    payload = recv_frame(client, timeout=5.0)
                except Timeout:
                    continue
                except (ConnectionClosed, OSError):
                    return
                except (FrameError, FrameTooLarge) as exc:
                    try:
                        send_frame(client, codec.encode(ErrorReply(exc.name, str(exc))))
                    except OSError:
                        pass
                    return
                replies, close = session.feed(payload, self.now_fn())
                try:
                    for reply in replies:
                        send_frame(client, reply)
                except OSError:
                    return
                if close:
                    return

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for worker in self._threads:
            worker.join(timeout=2.0)
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)


class FrameClient:
    """Blocking client for the threaded server; mirrors SimConnection."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.timeout = timeout
        self._sock = socket.create_connection((host, port), timeout=timeout)

    def send(self, payload: bytes) -> None:
        try:
            send_frame(self._sock, payload)
        except BrokenPipeError:
            raise ConnectionClosed("peer closed the connection") from None

    def recv(self, timeout: Optional[float] = None) -> bytes:
        return recv_frame(self._sock, timeout if timeout is not None else self.timeout)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
