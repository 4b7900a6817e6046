"""Two-party message channel with byte/round accounting.

Wire format (TCP): little-endian u64 payload length, u16 tag, payload. The
10 framing bytes are counted separately from payload bytes.

Rounds follow direction reversals: a message starts a new round when its
direction differs from the previous message's. The second half of a
simultaneous exchange is sent with ``overlap=True`` and never starts a round,
so one exchange costs one round.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import IntEnum

CLIENT = 0
SERVER = 1
BOTH = -1

FRAME_HEADER = struct.Struct("<QH")


class TransportError(ConnectionError):
    pass


class ProtocolDesync(RuntimeError):
    """The peer sent a message with an unexpected tag."""


class Tag(IntEnum):
    SETUP = 1
    SHARE_INPUT = 2
    REVEAL = 3
    MUL_OPEN = 10
    TRUNC_OPEN = 11
    CMP_OPEN = 12
    AND_OPEN = 13
    B2A_OPEN = 14
    MUX_OPEN = 15
    MATMUL_OPEN = 16
    HE_INPUT = 20
    HE_SELECT = 21
    HE_RESULT = 22
    TEST = 99


@dataclass(frozen=True)
class NetProfile:
    name: str
    bandwidth_bits_per_s: float
    latency_s: float

    def __post_init__(self):
        if self.bandwidth_bits_per_s <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_s < 0:
            raise ValueError("latency must be non-negative")


LAN = NetProfile("lan", 1e9, 0.5e-3)
WAN = NetProfile("wan", 400e6, 4e-3)
PROFILES = {"lan": LAN, "wan": WAN}


def profile_from_name(name: str | None) -> NetProfile | None:
    """Resolve 'lan' | 'wan' | 'none'; falls back to $MOE2PC_NET when name is None."""
    if name is None:
        name = os.environ.get("MOE2PC_NET", "none")
    name = name.lower()
    if name == "none":
        return None
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown network profile {name!r}") from None


@dataclass
class Section:
    bytes_c_to_s: int = 0
    bytes_s_to_c: int = 0
    rounds: int = 0
    messages: int = 0

    @property
    def total_bytes(self) -> int:
        return self.bytes_c_to_s + self.bytes_s_to_c

    def as_dict(self) -> dict:
        return {
            "bytes_c_to_s": self.bytes_c_to_s,
            "bytes_s_to_c": self.bytes_s_to_c,
            "rounds": self.rounds,
            "messages": self.messages,
        }


@dataclass
class ChannelStats:
    bytes_c_to_s: int = 0
    bytes_s_to_c: int = 0
    rounds: int = 0
    framing_bytes: int = 0
    messages: int = 0
    last_direction: int | None = None
    sections: dict = field(default_factory=lambda: defaultdict(Section))
    by_tag: dict = field(default_factory=lambda: defaultdict(int))
    transcript: list | None = None

    @property
    def total_bytes(self) -> int:
        return self.bytes_c_to_s + self.bytes_s_to_c

    def record(self, direction: int, tag: int, nbytes: int, overlap: bool, labels=()):
        new_round = not overlap and direction != self.last_direction
        if direction == CLIENT:
            self.bytes_c_to_s += nbytes
        else:
            self.bytes_s_to_c += nbytes
        self.framing_bytes += FRAME_HEADER.size
        self.messages += 1
        self.rounds += new_round
        # After an overlapped reply both directions are in flight, so whoever
        # speaks next opens a new round.
        self.last_direction = BOTH if overlap else direction
        self.by_tag[int(tag)] += nbytes
        for label in labels:
            sec = self.sections[label]
            if direction == CLIENT:
                sec.bytes_c_to_s += nbytes
            else:
                sec.bytes_s_to_c += nbytes
            sec.rounds += new_round
            sec.messages += 1
        if self.transcript is not None:
            self.transcript.append((direction, int(tag), nbytes))

    def modeled_time(self, profile: NetProfile | None) -> float:
        return modeled_time(self, profile)

    def summary(self) -> dict:
        return {
            "bytes_c_to_s": self.bytes_c_to_s,
            "bytes_s_to_c": self.bytes_s_to_c,
            "rounds": self.rounds,
            "framing_bytes": self.framing_bytes,
            "messages": self.messages,
        }


def modeled_time(stats, profile: NetProfile | None) -> float:
    """rounds * latency + 8 * payload bytes / bandwidth."""
    if profile is None:
        return 0.0
    total = stats.bytes_c_to_s + stats.bytes_s_to_c
    return stats.rounds * profile.latency_s + 8.0 * total / profile.bandwidth_bits_per_s


class Endpoint:
    """One party's end of the duplex channel."""

    def __init__(self, role: int, stats: ChannelStats, record_recv: bool):
        self.role = role
        self.peer = 1 - role
        self.stats = stats
        self._record_recv = record_recv
        self._labels: list[str] = []

    @contextmanager
    def section(self, name: str):
        """Attribute traffic inside the block to ``name`` (nested names join with '/')."""
        full = f"{self._labels[-1]}/{name}" if self._labels else name
        self._labels.append(full)
        try:
            yield
        finally:
            self._labels.pop()

    def send(self, tag: int, payload: bytes, overlap: bool = False):
        payload = bytes(payload)
        self.stats.record(self.role, tag, len(payload), overlap, self._labels)
        self._send_frame(int(tag), payload)

    def recv(self, tag: int | None = None, overlap: bool = False) -> bytes:
        got_tag, payload = self._recv_frame()
        if tag is not None and got_tag != int(tag):
            raise ProtocolDesync(f"expected tag {int(tag)}, got {got_tag}")
        if self._record_recv:
            self.stats.record(self.peer, got_tag, len(payload), overlap, self._labels)
        return payload

    def exchange(self, tag: int, payload: bytes) -> bytes:
        """Simultaneous swap of equal-role messages; costs one round."""
        if self.role == CLIENT:
            self.send(tag, payload)
            return self.recv(tag, overlap=True)
        got = self.recv(tag)
        self.send(tag, payload, overlap=True)
        return got

    def close(self):
        pass

    def _send_frame(self, tag: int, payload: bytes):
        raise NotImplementedError

    def _recv_frame(self) -> tuple[int, bytes]:
        raise NotImplementedError


_CLOSED = object()


class InprocEndpoint(Endpoint):
    def __init__(self, role, stats, outbox: queue.Queue, inbox: queue.Queue, timeout: float):
        # Both ends share one stats object; the sender records.
        super().__init__(role, stats, record_recv=False)
        self._out = outbox
        self._in = inbox
        self._timeout = timeout

    def _send_frame(self, tag, payload):
        self._out.put((tag, payload))

    def _recv_frame(self):
        try:
            item = self._in.get(timeout=self._timeout)
        except queue.Empty:
            raise TimeoutError("peer did not send within timeout") from None
        if item is _CLOSED:
            raise TransportError("peer closed the channel")
        return item

    def close(self):
        self._out.put(_CLOSED)


def connect_inproc(timeout: float = 600.0, transcript: bool = False) -> tuple[InprocEndpoint, InprocEndpoint]:
    stats = ChannelStats(transcript=[] if transcript else None)
    c2s, s2c = queue.Queue(), queue.Queue()
    client = InprocEndpoint(CLIENT, stats, c2s, s2c, timeout)
    server = InprocEndpoint(SERVER, stats, s2c, c2s, timeout)
    return client, server


class TcpEndpoint(Endpoint):
    def __init__(self, role, sock: socket.socket, transcript: bool = False, listener=None):
        super().__init__(role, ChannelStats(transcript=[] if transcript else None), record_recv=True)
        self._sock = sock
        self._listener = listener
        self._lock = threading.Lock()

    def _send_frame(self, tag, payload):
        with self._lock:
            self._sock.sendall(FRAME_HEADER.pack(len(payload), tag) + payload)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            k = self._sock.recv_into(view[got:], n - got)
            if k == 0:
                raise TransportError("connection closed by peer")
            got += k
        return bytes(buf)

    def _recv_frame(self):
        length, tag = FRAME_HEADER.unpack(self._recv_exact(FRAME_HEADER.size))
        return tag, self._recv_exact(length)

    def close(self):
        try:
            self._sock.close()
        finally:
            if self._listener is not None:
                self._listener.close()


def connect_tcp(addr: tuple[str, int], role: int, timeout: float = 30.0,
                transcript: bool = False, io_timeout: float | None = 600.0) -> TcpEndpoint:
    """Server role listens on ``addr`` and accepts one peer; client role connects.

    The client retries until ``timeout`` so the two processes may start in any
    order. Raises TimeoutError when the peer never shows up.
    """
    host, port = addr
    deadline = time.monotonic() + timeout
    if role == SERVER:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(1)
        listener.settimeout(timeout)
        try:
            sock, _ = listener.accept()
        except socket.timeout:
            listener.close()
            raise TimeoutError(f"no client connected to {host}:{port} within {timeout}s") from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(io_timeout)
        return TcpEndpoint(SERVER, sock, transcript, listener)
    last_err = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
        except (ConnectionRefusedError, socket.timeout, OSError) as err:
            last_err = err
            time.sleep(0.05)
            continue
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(io_timeout)
        return TcpEndpoint(CLIENT, sock, transcript)
    raise TimeoutError(f"could not reach {host}:{port} within {timeout}s ({last_err})")
