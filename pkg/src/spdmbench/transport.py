"""Message-boundary-preserving duplex channels.

MmioChannel models the device mailbox interaction: the driver writes a
request into a fixed buffer and raises a doorbell flag; the device
consumes it, writes its response into the opposite buffer, and raises
the response-ready flag (the stand-in for an interrupt). One message may
be in flight per direction; a writer blocks while its flag is still
raised, which keeps the flag alternation strict.

TcpChannel frames messages with a 4-byte big-endian length prefix for
split-process benchmarking.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field

from .errors import CapacityExceeded, ChannelClosed, TransportTimeout

DEFAULT_MMIO_CAPACITY = 64 * 1024
TCP_MAX_FRAME = 16 * 1024 * 1024


@dataclass
class ChannelStats:
    messages: dict = field(default_factory=lambda: {"a_to_b": 0, "b_to_a": 0})
    bytes: dict = field(default_factory=lambda: {"a_to_b": 0, "b_to_a": 0})

    def record(self, direction: str, n: int) -> None:
        self.messages[direction] += 1
        self.bytes[direction] += n

    @property
    def total_messages(self) -> int:
        return sum(self.messages.values())


class _MailboxDirection:
    """One buffer + one flag; strict alternation between writer and reader."""

    def __init__(self, lock: threading.Condition, capacity: int):
        self.cond = lock
        self.capacity = capacity
        self.buffer = b""
        self.flag = False  # raised = message ready for the reader
        self.closed = False

    def write(self, data: bytes, timeout: float | None) -> None:
        if len(data) > self.capacity:
            raise CapacityExceeded(f"{len(data)} bytes > {self.capacity}")
        with self.cond:
            if not self.cond.wait_for(lambda: not self.flag or self.closed, timeout):
                raise TransportTimeout("peer never consumed previous message")
            if self.closed:
                raise ChannelClosed("channel closed")
            self.buffer = data
            self.flag = True
            self.cond.notify_all()

    def read(self, timeout: float | None) -> bytes:
        with self.cond:
            if not self.cond.wait_for(lambda: self.flag or self.closed, timeout):
                raise TransportTimeout("no message within timeout")
            if self.closed and not self.flag:
                raise ChannelClosed("channel closed")
            data = self.buffer
            self.buffer = b""
            self.flag = False
            self.cond.notify_all()
            return data

    def reset(self) -> None:
        with self.cond:
            self.buffer = b""
            self.flag = False
            self.cond.notify_all()

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class MmioEndpoint:
    """One side of an MmioChannel."""

    def __init__(self, channel: "MmioChannel", out: _MailboxDirection,
                 inbound: _MailboxDirection, direction: str):
        self.channel = channel
        self._out = out
        self._in = inbound
        self._dir = direction

    @property
    def stats(self) -> ChannelStats:
        return self.channel.stats

    def send_msg(self, data: bytes, timeout: float | None = None) -> None:
        self._out.write(data, timeout)
        self.channel.stats.record(self._dir, len(data))

    def recv_msg(self, timeout: float | None = None) -> bytes:
        return self._in.read(timeout)

    def close(self) -> None:
        self.channel.close()


class MmioChannel:
    """Request/response mailbox pair with doorbell-style flags."""

    def __init__(self, capacity: int = DEFAULT_MMIO_CAPACITY):
        self.capacity = capacity
        self.stats = ChannelStats()
        cond_a = threading.Condition()
        cond_b = threading.Condition()
        self._request = _MailboxDirection(cond_a, capacity)   # a -> b
        self._response = _MailboxDirection(cond_b, capacity)  # b -> a
        self.requester_end = MmioEndpoint(self, self._request, self._response, "a_to_b")
        self.responder_end = MmioEndpoint(self, self._response, self._request, "b_to_a")

    @property
    def doorbell(self) -> bool:
        return self._request.flag

    @property
    def response_ready(self) -> bool:
        return self._response.flag

    def reset(self) -> None:
        """Flags cleared, buffers zeroed; statistics preserved."""
        self._request.reset()
        self._response.reset()

    def close(self) -> None:
        self._request.close()
        self._response.close()


class TcpEndpoint:
    """Connected stream endpoint with 4-byte big-endian length framing."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.stats = ChannelStats()

    def send_msg(self, data: bytes, timeout: float | None = None) -> None:
        if len(data) > TCP_MAX_FRAME:
            raise CapacityExceeded(f"frame of {len(data)} bytes > {TCP_MAX_FRAME}")
        try:
            self.sock.sendall(struct.pack(">I", len(data)) + data)
        except (BrokenPipeError, ConnectionResetError, OSError) as exc:
            raise ChannelClosed(str(exc)) from None
        self.stats.record("a_to_b", len(data))

    def _read_exact(self, n: int, timeout: float | None) -> bytes:
        self.sock.settimeout(timeout)
        chunks = bytearray()
        while len(chunks) < n:
            try:
                chunk = self.sock.recv(n - len(chunks))
            except socket.timeout:
                raise TransportTimeout("recv timed out") from None
            except OSError as exc:
                raise ChannelClosed(str(exc)) from None
            if not chunk:
                raise ChannelClosed("peer closed connection")
            chunks += chunk
        return bytes(chunks)

    def recv_msg(self, timeout: float | None = None) -> bytes:
        header = self._read_exact(4, timeout)
        (length,) = struct.unpack(">I", header)
        if length > TCP_MAX_FRAME:
            raise CapacityExceeded(f"peer announced {length}-byte frame")
        data = self._read_exact(length, timeout)
        self.stats.record("b_to_a", len(data))
        return data

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def tcp_connect(host: str, port: int, timeout: float = 10.0) -> TcpEndpoint:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return TcpEndpoint(sock)


def tcp_listener(host: str, port: int) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(4)
    return srv


class LoopbackEndpoint:
    """Synchronous in-process endpoint: send_msg hands the frame to a
    service callable and stores its response for the next recv_msg.

    Boundary-preserving, exactly-once and ordered like the other
    channels, but with no thread handoff, so benchmark timings see only
    protocol and device work rather than scheduler noise.
    """

    def __init__(self, service_fn):
        self._service = service_fn
        self._pending = None
        self.stats = ChannelStats()

    def send_msg(self, data: bytes, timeout: float | None = None) -> None:
        if self._pending is not None:
            raise CapacityExceeded("previous response not consumed")
        self.stats.record("a_to_b", len(data))
        self._pending = self._service(data)

    def recv_msg(self, timeout: float | None = None) -> bytes:
        if self._pending is None:
            raise TransportTimeout("no response pending")
        data = self._pending
        self._pending = None
        self.stats.record("b_to_a", len(data))
        return data

    def close(self) -> None:
        self._pending = None


class InterceptEndpoint:
    """Eavesdropper/tamper wrapper for security property tests.

    on_send/on_recv see every frame; returning bytes replaces the frame,
    returning None leaves it untouched. Every frame is also recorded in
    `captured` (post-mutation for sends, pre-mutation for receives).
    """

    def __init__(self, inner, on_send=None, on_recv=None):
        self.inner = inner
        self.on_send = on_send
        self.on_recv = on_recv
        self.captured: list[bytes] = []

    @property
    def stats(self):
        return self.inner.stats

    def send_msg(self, data: bytes, timeout: float | None = None) -> None:
        if self.on_send is not None:
            mutated = self.on_send(data)
            if mutated is not None:
                data = mutated
        self.captured.append(data)
        self.inner.send_msg(data, timeout)

    def recv_msg(self, timeout: float | None = None) -> bytes:
        data = self.inner.recv_msg(timeout)
        self.captured.append(data)
        if self.on_recv is not None:
            mutated = self.on_recv(data)
            if mutated is not None:
                data = mutated
        return data

    def close(self) -> None:
        self.inner.close()
