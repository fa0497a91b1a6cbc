"""Emulated peripherals: an RNG responder device and a block device whose
driver tunnels reads and writes through a secure session.

Between driver and device every transport frame is an encoded
BlockRequest (driver to device) or BlockResponse (device to driver).
Protocol traffic rides in BlockRequests with the Spdm opcode, sector 0
and length = frame length; in secured mode the actual Read/Write/Flush
requests travel as sealed application payloads inside those frames, so
disk data never crosses the transport outside a SecuredRecord.
"""

from __future__ import annotations

import random
import struct
import time
from dataclasses import dataclass, field

from . import wire
from .errors import (
    ChannelClosed,
    DecryptError,
    InvalidPhase,
    MalformedMessage,
    RangeError,
    ResponderError,
    TransportTimeout,
)
from .requester import Requester, RequesterConfig, bootstrap
from .responder import Responder

RNG_OPCODE = 0x01
BLOCK_OPCODE = 0x02
RNG_REPLY_LEN = 8

SECTOR_SIZE = 512
DEFAULT_CAPACITY_BYTES = 64 * 1024 * 1024

OP_READ = 0x01
OP_WRITE = 0x02
OP_FLUSH = 0x03
OP_SPDM = 0x04

STATUS_OK = 0x00
STATUS_RANGE = 0x01
STATUS_MALFORMED = 0x02

_BLOCK_REQ = struct.Struct("<BQI")


@dataclass(frozen=True)
class BlockRequest:
    opcode: int
    sector: int = 0
    length: int = 0
    data: bytes = b""

    def encode(self) -> bytes:
        return (_BLOCK_REQ.pack(self.opcode, self.sector, self.length)
                + struct.pack("<I", len(self.data)) + self.data)

    @classmethod
    def decode(cls, raw: bytes) -> "BlockRequest":
        if len(raw) < _BLOCK_REQ.size + 4:
            raise MalformedMessage("short block request")
        opcode, sector, length = _BLOCK_REQ.unpack_from(raw)
        (dlen,) = struct.unpack_from("<I", raw, _BLOCK_REQ.size)
        data = raw[_BLOCK_REQ.size + 4:]
        if len(data) != dlen:
            raise MalformedMessage("block request data length mismatch")
        if opcode not in (OP_READ, OP_WRITE, OP_FLUSH, OP_SPDM):
            raise MalformedMessage(f"unknown block opcode {opcode:#x}")
        return cls(opcode=opcode, sector=sector, length=length, data=data)


@dataclass(frozen=True)
class BlockResponse:
    status: int
    data: bytes = b""

    def encode(self) -> bytes:
        return bytes((self.status,)) + struct.pack("<I", len(self.data)) + self.data

    @classmethod
    def decode(cls, raw: bytes) -> "BlockResponse":
        if len(raw) < 5:
            raise MalformedMessage("short block response")
        (dlen,) = struct.unpack_from("<I", raw, 1)
        data = raw[5:]
        if len(data) != dlen:
            raise MalformedMessage("block response data length mismatch")
        return cls(status=raw[0], data=data)


def _precise_delay(seconds: float) -> None:
    """Busy-wait on the monotonic clock.

    time.sleep has tick-level jitter and parks the core in an idle state,
    which makes the first hundreds of microseconds of post-wake work run
    several times slower; the reference methodology pins the CPU clock
    (C-states and frequency scaling off), which a container cannot do, so
    the model spins instead.
    """
    deadline = time.perf_counter() + seconds
    while time.perf_counter() < deadline:
        pass


@dataclass
class LatencyModel:
    """Synthetic disk timing: a seek penalty plus an optional rotational
    term on non-contiguous requests, and a per-byte transfer cost. A
    zero-configured model adds nothing.

    The rotational term draws uniformly from [0, rot_latency_ms] per
    seek (a 7200 rpm platter gives 8.33 ms), reproducing the run-to-run
    dispersion real disks show on random workloads.
    """

    seek_delay_ms: float = 0.0
    per_byte_ns: float = 0.0
    rot_latency_ms: float = 0.0
    enabled: bool = True

    def delay_for(self, contiguous: bool, nbytes: int, rng=None) -> float:
        if not self.enabled:
            return 0.0
        seconds = nbytes * self.per_byte_ns * 1e-9
        if not contiguous:
            seconds += self.seek_delay_ms * 1e-3
            if self.rot_latency_ms > 0 and rng is not None:
                seconds += rng.random() * self.rot_latency_ms * 1e-3
        return seconds


class RngDevice:
    """Responds to an RNG request with exactly 8 random bytes."""

    def __init__(self, seed: int | None = None, opcode: int = RNG_OPCODE):
        self.opcode = opcode
        self._rng = random.Random(seed)

    def handle(self, body: bytes) -> bytes:
        return self._rng.randbytes(RNG_REPLY_LEN)


class BlockDevice:
    """Sector-addressed store with a synthetic latency model."""

    def __init__(self, capacity_bytes: int = DEFAULT_CAPACITY_BYTES,
                 sector_size: int = SECTOR_SIZE,
                 backing_path=None,
                 latency: LatencyModel | None = None,
                 latency_seed: int | None = None):
        self.sector_size = sector_size
        self.capacity_sectors = capacity_bytes // sector_size
        self.latency = latency if latency is not None else LatencyModel(enabled=False)
        self._latency_rng = random.Random(latency_seed)
        self.last_end_sector: int | None = None
        self._file = None
        if backing_path is None:
            self._store = bytearray(self.capacity_sectors * sector_size)
        else:
            self._file = open(backing_path, "r+b")
            self._store = None

    def close(self) -> None:
        if self._file is not None:
            self._file.close()

    def _apply_latency(self, sector: int, nbytes: int) -> None:
        contiguous = self.last_end_sector is not None and sector == self.last_end_sector
        delay = self.latency.delay_for(contiguous, nbytes, self._latency_rng)
        if delay > 0:
            _precise_delay(delay)
        self.last_end_sector = sector + (nbytes // self.sector_size)

    def _check_range(self, sector: int, nbytes: int) -> None:
        if nbytes % self.sector_size:
            raise MalformedMessage("length not a multiple of the sector size")
        if sector + nbytes // self.sector_size > self.capacity_sectors:
            raise RangeError(f"sector {sector} + {nbytes} bytes beyond capacity")

    def read(self, sector: int, nbytes: int) -> bytes:
        self._check_range(sector, nbytes)
        self._apply_latency(sector, nbytes)
        offset = sector * self.sector_size
        if self._store is not None:
            return bytes(self._store[offset:offset + nbytes])
        self._file.seek(offset)
        return self._file.read(nbytes)

    def write(self, sector: int, data: bytes) -> None:
        self._check_range(sector, len(data))
        self._apply_latency(sector, len(data))
        offset = sector * self.sector_size
        if self._store is not None:
            self._store[offset:offset + len(data)] = data
        else:
            self._file.seek(offset)
            self._file.write(data)

    def flush(self) -> None:
        if self._file is not None:
            self._file.flush()

    def service_request(self, req: BlockRequest) -> BlockResponse:
        """Storage opcodes only; Spdm frames are routed by the host."""
        try:
            if req.opcode == OP_READ:
                return BlockResponse(STATUS_OK, self.read(req.sector, req.length))
            if req.opcode == OP_WRITE:
                if len(req.data) != req.length:
                    return BlockResponse(STATUS_MALFORMED)
                self.write(req.sector, req.data)
                return BlockResponse(STATUS_OK)
            if req.opcode == OP_FLUSH:
                self.flush()
                return BlockResponse(STATUS_OK)
        except RangeError:
            return BlockResponse(STATUS_RANGE)
        except MalformedMessage:
            return BlockResponse(STATUS_MALFORMED)
        return BlockResponse(STATUS_MALFORMED)


class BlockDeviceHost:
    """Couples a BlockDevice with a responder context.

    Serves the driver's frames: storage opcodes go straight to the
    device (plain mode); Spdm opcodes are handed to the responder, which
    routes sealed Read/Write/Flush payloads back into the same device
    via the registered application handler. Both paths share the same
    storage entry points, so the latency model applies identically.
    """

    def __init__(self, device: BlockDevice, responder: Responder):
        self.device = device
        self.responder = responder
        responder.register_app_handler(BLOCK_OPCODE, self._handle_sealed_block)

    def _handle_sealed_block(self, body: bytes) -> bytes:
        try:
            req = BlockRequest.decode(body)
        except MalformedMessage:
            return BlockResponse(STATUS_MALFORMED).encode()
        if req.opcode == OP_SPDM:
            return BlockResponse(STATUS_MALFORMED).encode()
        return self.device.service_request(req).encode()

    def service(self, raw: bytes) -> bytes:
        try:
            req = BlockRequest.decode(raw)
        except MalformedMessage:
            return BlockResponse(STATUS_MALFORMED).encode()
        if req.opcode == OP_SPDM:
            return BlockResponse(
                STATUS_OK, self.responder.handle_message(req.data)).encode()
        return self.device.service_request(req).encode()

    def serve(self, endpoint, stop=None, poll: float = 0.05) -> None:
        while stop is None or not stop.is_set():
            try:
                raw = endpoint.recv_msg(timeout=poll)
            except TransportTimeout:
                continue
            except ChannelClosed:
                return
            try:
                endpoint.send_msg(self.service(raw))
            except ChannelClosed:
                return


class BlockTunnelEndpoint:
    """Adapts a driver-side endpoint so protocol frames ride in
    BlockRequests with the Spdm opcode (sector 0, length = frame length)."""

    def __init__(self, inner):
        self.inner = inner

    @property
    def stats(self):
        return self.inner.stats

    def send_msg(self, data: bytes, timeout: float | None = None) -> None:
        req = BlockRequest(opcode=OP_SPDM, sector=0, length=len(data), data=data)
        self.inner.send_msg(req.encode(), timeout)

    def recv_msg(self, timeout: float | None = None) -> bytes:
        rsp = BlockResponse.decode(self.inner.recv_msg(timeout))
        if rsp.status != STATUS_OK:
            raise MalformedMessage(f"tunnel status {rsp.status}")
        return rsp.data

    def close(self) -> None:
        self.inner.close()


MODE_PLAIN = "plain"
MODE_SECURED = "secured"


@dataclass
class BootstrapTiming:
    steps: dict = field(default_factory=dict)
    total: float = 0.0


class BlockDriver:
    """Driver half of the pair; one outstanding request at a time."""

    def __init__(self, endpoint, mode: str, sector_size: int = SECTOR_SIZE,
                 requester_config: RequesterConfig | None = None,
                 chain_slot: int = 0):
        if mode not in (MODE_PLAIN, MODE_SECURED):
            raise ValueError(f"unknown mode {mode!r}")
        self.endpoint = endpoint
        self.mode = mode
        self.sector_size = sector_size
        self.requester: Requester | None = None
        self.session_id: int | None = None
        self.bootstrap_timing = BootstrapTiming()
        if mode == MODE_SECURED:
            if requester_config is None:
                raise ValueError("secured mode needs a requester config")
            t0 = time.perf_counter()
            tick = time.perf_counter()
            self.requester = Requester(requester_config,
                                       BlockTunnelEndpoint(endpoint))
            self.bootstrap_timing.steps["init"] = time.perf_counter() - tick
            steps = bootstrap(self.requester, slot=chain_slot)
            self.session_id = steps.pop("session_id")
            self.bootstrap_timing.steps.update(steps)
            self.bootstrap_timing.total = time.perf_counter() - t0

    def _plain_roundtrip(self, req: BlockRequest) -> BlockResponse:
        self.endpoint.send_msg(req.encode())
        return BlockResponse.decode(self.endpoint.recv_msg())

    def _secured_roundtrip(self, req: BlockRequest) -> BlockResponse:
        payload = bytes((BLOCK_OPCODE,)) + req.encode()
        out = self.requester.send_app_request(self.session_id, payload)
        if not out or out[0] != BLOCK_OPCODE:
            raise MalformedMessage("unexpected app payload")
        return BlockResponse.decode(out[1:])

    def _roundtrip(self, req: BlockRequest) -> BlockResponse:
        if self.mode == MODE_PLAIN:
            rsp = self._plain_roundtrip(req)
        else:
            if self.session_id is None:
                raise InvalidPhase("secured driver has no session")
            rsp = self._secured_roundtrip(req)
        if rsp.status == STATUS_RANGE:
            raise RangeError("device rejected the request range")
        if rsp.status != STATUS_OK:
            raise MalformedMessage(f"device status {rsp.status}")
        return rsp

    def read_sectors(self, sector: int, count: int) -> bytes:
        return self._roundtrip(BlockRequest(
            opcode=OP_READ, sector=sector, length=count * self.sector_size)).data

    def write_sectors(self, sector: int, data: bytes) -> None:
        self._roundtrip(BlockRequest(
            opcode=OP_WRITE, sector=sector, length=len(data), data=data))

    def flush(self) -> None:
        self._roundtrip(BlockRequest(opcode=OP_FLUSH))


def driver_init(endpoint, mode: str,
                requester_config: RequesterConfig | None = None,
                sector_size: int = SECTOR_SIZE) -> BlockDriver:
    """Plain mode is ready immediately; secured mode runs the full
    bootstrap (connection, digests, certificate, challenge with mutual
    auth when negotiated, key exchange) and records its duration."""
    return BlockDriver(endpoint, mode, sector_size=sector_size,
                       requester_config=requester_config)


def rng_request(requester: Requester, session_id: int | None, mode: str) -> bytes:
    """Fetch 8 random bytes, through the session or over the baseline path."""
    if mode == MODE_SECURED:
        if session_id is None:
            raise InvalidPhase("secured rng request needs a session")
        out = requester.send_app_request(session_id, bytes((RNG_OPCODE,)))
    elif mode == MODE_PLAIN:
        out = requester.send_plain_app(bytes((RNG_OPCODE,)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if len(out) != 1 + RNG_REPLY_LEN or out[0] != RNG_OPCODE:
        raise MalformedMessage("unexpected rng reply")
    return out[1:]
