"""Cross-party messaging.

Frame layout (little endian)::

    b"CVF1" | kind u8 | batch_id u64 | rows u32 | cols u32 | rows*cols float32

Socket transports prefix every frame with its length as a u32.
"""
from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ChannelClosed, ConfigError, ProtocolError

MAGIC = b"CVF1"
HEADER = struct.Struct("<4sBQII")
LENGTH_PREFIX = struct.Struct("<I")
U32_MAX = 2**32 - 1


class MessageKind(enum.IntEnum):
    FORWARD_ACT = 0
    BACKWARD_DER = 1
    CONTROL = 2


# CONTROL batch ids
START = 0
STOP = 1


@dataclass(frozen=True, eq=False)
class Message:
    kind: MessageKind
    batch_id: int
    payload: np.ndarray

    @property
    def rows(self) -> int:
        return self.payload.shape[0]

    @property
    def cols(self) -> int:
        return self.payload.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.batch_id == other.batch_id
            and self.payload.shape == other.payload.shape
            and np.array_equal(self.payload, other.payload)
        )


def control(batch_id: int) -> Message:
    return Message(MessageKind.CONTROL, batch_id, np.zeros((0, 0)))


def encode(msg: Message) -> bytes:
    payload = np.asarray(msg.payload)
    if payload.ndim != 2:
        raise ProtocolError(f"payload must be 2-D, got shape {payload.shape}")
    rows, cols = payload.shape
    if rows > U32_MAX or cols > U32_MAX or rows * cols > U32_MAX:
        raise ProtocolError(f"payload {rows}x{cols} too large for a frame")
    if msg.batch_id < 0:
        raise ProtocolError("batch_id must be non-negative")
    head = HEADER.pack(MAGIC, int(msg.kind), msg.batch_id, rows, cols)
    return head + np.ascontiguousarray(payload, dtype="<f4").tobytes()


def decode(frame: bytes) -> Message:
    if len(frame) < HEADER.size:
        raise ProtocolError(f"truncated frame: {len(frame)} bytes, header needs {HEADER.size}")
    magic, kind, batch_id, rows, cols = HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}") from None
    expected = HEADER.size + 4 * rows * cols
    if len(frame) != expected:
        raise ProtocolError(f"frame is {len(frame)} bytes, header announces {expected}")
    payload = np.frombuffer(frame, dtype="<f4", offset=HEADER.size).reshape(rows, cols)
    return Message(kind, batch_id, payload.astype(np.float64))


def wire_round(x) -> np.ndarray:
    """What the receiver sees after a float32 round trip."""
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass
class ChannelConfig:
    bandwidth_bps: float = 300e6
    latency_s: float = 0.0
    mode: str = "in_process"
    simulate_delay: bool = True
    real_sleep: bool = False
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ConfigError("bandwidth must be positive")
        if self.latency_s < 0:
            raise ConfigError("latency must be non-negative")
        if self.mode not in ("in_process", "socket"):
            raise ConfigError(f"unknown transport mode {self.mode!r}")


def simulated_delay(nbytes: int, cfg: ChannelConfig) -> float:
    """Seconds to deliver ``nbytes`` over the configured link."""
    return cfg.latency_s + 8.0 * nbytes / cfg.bandwidth_bps


class SimClock:
    """Simulated wall clock shared by both ends of a run."""

    def __init__(self):
        self._lock = threading.Lock()
        self._now = 0.0

    def charge(self, seconds: float):
        with self._lock:
            self._now += seconds

    @property
    def now(self) -> float:
        with self._lock:
            return self._now


@dataclass
class LogEntry:
    sender: str
    frame: bytes


class Endpoint:
    """One party's end of a duplex channel.

    Subclasses provide ``_transmit`` and ``_receive``.  Every frame sent is
    appended to the shared ``log`` so runs can be audited and diffed.
    """

    def __init__(self, name: str, cfg: ChannelConfig, clock: SimClock, log: list):
        self.name = name
        self.cfg = cfg
        self.clock = clock
        self.log = log
        self.bytes_sent = 0
        self.frames_sent = 0
        self._log_lock = threading.Lock()

    def send(self, msg: Message):
        frame = encode(msg)
        if msg.kind != MessageKind.CONTROL and self.cfg.simulate_delay:
            delay = simulated_delay(len(frame), self.cfg)
            self.clock.charge(delay)
            if self.cfg.real_sleep:
                time.sleep(delay)
        with self._log_lock:
            self.log.append(LogEntry(self.name, frame))
        self.bytes_sent += self._transmit(frame)
        self.frames_sent += 1

    def recv(self, timeout: float | None = None) -> Message:
        return decode(self._receive(timeout))

    def _transmit(self, frame: bytes) -> int:
        raise NotImplementedError

    def _receive(self, timeout):
        raise NotImplementedError

    def close(self):
        pass


_CLOSED = object()


class InProcessEndpoint(Endpoint):
    def __init__(self, name, cfg, clock, log, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__(name, cfg, clock, log)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _transmit(self, frame):
        if self._closed:
            raise ChannelClosed(f"{self.name}: endpoint closed")
        self._outbox.put(frame)
        return len(frame)

    def _receive(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"{self.name}: no message within {timeout}s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ChannelClosed(f"{self.name}: peer closed")
        return item

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


class SocketEndpoint(Endpoint):
    """Length-prefixed frames over a stream socket.

    A reader thread drains the socket into a queue, so ``send`` never
    deadlocks against a peer that is itself blocked in ``send``.
    """

    def __init__(self, name, cfg, clock, log, sock: socket.socket):
        super().__init__(name, cfg, clock, log)
        self._sock = sock
        self._inbox: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, name=f"{name}-reader", daemon=True)
        self._reader.start()

    def _read_exact(self, n: int) -> bytes | None:
        chunks = []
        while n:
            try:
                chunk = self._sock.recv(min(n, 1 << 20))
            except OSError:
                return None
            if not chunk:
                return None
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _read_loop(self):
        while True:
            head = self._read_exact(LENGTH_PREFIX.size)
            if head is None:
                break
            (length,) = LENGTH_PREFIX.unpack(head)
            body = self._read_exact(length)
            if body is None:
                break
            self._inbox.put(body)
        self._inbox.put(_CLOSED)

    def _transmit(self, frame):
        data = LENGTH_PREFIX.pack(len(frame)) + frame
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise ChannelClosed(f"{self.name}: {exc}") from exc
        return len(data)

    def _receive(self, timeout):
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"{self.name}: no message within {timeout}s") from None
        if item is _CLOSED:
            self._inbox.put(_CLOSED)
            raise ChannelClosed(f"{self.name}: peer closed")
        return item

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


@dataclass
class Channel:
    a: Endpoint
    b: Endpoint
    clock: SimClock
    log: list = field(default_factory=list)

    @property
    def bytes_sent(self) -> int:
        return self.a.bytes_sent + self.b.bytes_sent

    @property
    def frames_sent(self) -> int:
        return self.a.frames_sent + self.b.frames_sent

    def close(self):
        self.a.close()
        self.b.close()


def _connected_sockets(cfg: ChannelConfig) -> tuple[socket.socket, socket.socket]:
    with socket.create_server((cfg.host, cfg.port)) as server:
        host, port = server.getsockname()[:2]
        client = socket.create_connection((host, port))
        peer, _ = server.accept()
    for s in (client, peer):
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return client, peer


def open_channel(cfg: ChannelConfig | None = None, clock: SimClock | None = None) -> Channel:
    """Duplex channel between Party A (``.a``) and Party B (``.b``)."""
    cfg = cfg or ChannelConfig()
    clock = clock or SimClock()
    log: list = []
    if cfg.mode == "in_process":
        a_to_b: queue.Queue = queue.Queue()
        b_to_a: queue.Queue = queue.Queue()
        a = InProcessEndpoint("A", cfg, clock, log, inbox=b_to_a, outbox=a_to_b)
        b = InProcessEndpoint("B", cfg, clock, log, inbox=a_to_b, outbox=b_to_a)
    else:
        sa, sb = _connected_sockets(cfg)
        a = SocketEndpoint("A", cfg, clock, log, sa)
        b = SocketEndpoint("B", cfg, clock, log, sb)
    return Channel(a, b, clock, log)
