"""Protocol messages, the secured-record envelope, and their binary codec.

Layout rules (documented in docs/wire-format.md): 4-byte header
(version, code, param1, param2), little-endian integers, 2-byte length
prefixes for variable fields, 4-byte prefixes for certificate portions,
application payloads, and encapsulated inner messages. Decoding is
strict: unknown flag values, truncation, and trailing bytes are all
rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from .crypto import AlgorithmMenu, CryptoSuite
from .errors import (
    EncodingOverflow,
    MalformedMessage,
    UnsupportedRequest,
    VersionMismatch,
)

PROTOCOL_V10 = 0x10
PROTOCOL_V11 = 0x11
SUPPORTED_WIRE_VERSIONS = frozenset({PROTOCOL_V10, PROTOCOL_V11})

HEADER_LEN = 4
NONCE_LEN = 32
RECORD_HEADER_LEN = 16  # session_id u32 | seq_num u64 | ciphertext_length u32

# Transport frame discriminators (first byte of every frame on a channel).
FRAME_PLAIN = 0x00
FRAME_SECURED = 0x01
FRAME_APP_PLAIN = 0x02


class Code(IntEnum):
    """Request/response code bytes. Responses are request | 0x40."""

    GET_VERSION = 0x01
    GET_CAPABILITIES = 0x02
    NEGOTIATE_ALGORITHMS = 0x03
    GET_DIGESTS = 0x04
    GET_CERTIFICATE = 0x05
    CHALLENGE = 0x06
    GET_MEASUREMENTS = 0x07
    KEY_EXCHANGE = 0x08
    FINISH = 0x09
    PSK_EXCHANGE = 0x0A
    PSK_FINISH = 0x0B
    HEARTBEAT = 0x0C
    KEY_UPDATE = 0x0D
    END_SESSION = 0x0E
    GET_ENCAPSULATED_REQUEST = 0x0F
    DELIVER_ENCAPSULATED_RESPONSE = 0x10
    VERSION = 0x41
    CAPABILITIES = 0x42
    ALGORITHMS = 0x43
    DIGESTS = 0x44
    CERTIFICATE = 0x45
    CHALLENGE_AUTH = 0x46
    MEASUREMENTS = 0x47
    KEY_EXCHANGE_RSP = 0x48
    FINISH_RSP = 0x49
    PSK_EXCHANGE_RSP = 0x4A
    PSK_FINISH_RSP = 0x4B
    HEARTBEAT_ACK = 0x4C
    KEY_UPDATE_ACK = 0x4D
    END_SESSION_ACK = 0x4E
    ENCAPSULATED_REQUEST = 0x4F
    ENCAPSULATED_RESPONSE_ACK = 0x50
    APP_DATA = 0x60
    ERROR = 0x7F


class ErrorCode(IntEnum):
    INVALID_REQUEST = 0x01
    BUSY = 0x02
    UNEXPECTED_REQUEST = 0x03
    UNSUPPORTED_REQUEST = 0x04
    DECRYPT_ERROR = 0x05
    VERSION_MISMATCH = 0x06
    MALFORMED_MESSAGE = 0x07


class KeyUpdateOp(IntEnum):
    UPDATE_KEY = 0x01
    UPDATE_ALL_KEYS = 0x02
    VERIFY_NEW_KEY = 0x03


class MeasOperand:
    """GetMeasurements operand byte: 0x00 = count, 0xFF = all, k = block k."""

    COUNT = 0x00
    ALL = 0xFF


# -- strict reader / field builders -------------------------------------------


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise MalformedMessage("truncated message")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def lp16(self) -> bytes:
        return self.take(self.u16())

    def lp32(self) -> bytes:
        return self.take(self.u32())

    def flag(self) -> bool:
        v = self.u8()
        if v > 1:
            raise MalformedMessage(f"flag byte must be 0 or 1, got {v}")
        return bool(v)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedMessage("trailing bytes after message body")


def _lp16(data: bytes) -> bytes:
    if len(data) > 0xFFFF:
        raise EncodingOverflow("field exceeds 2-byte length prefix")
    return struct.pack("<H", len(data)) + data


def _lp32(data: bytes) -> bytes:
    if len(data) > 0xFFFFFFFF:
        raise EncodingOverflow("field exceeds 4-byte length prefix")
    return struct.pack("<I", len(data)) + data


def _opt16(data: bytes | None) -> bytes:
    if data is None:
        return b"\x00"
    return b"\x01" + _lp16(data)


def _opt32(data: bytes | None) -> bytes:
    if data is None:
        return b"\x00"
    return b"\x01" + _lp32(data)


def _fixed(data: bytes, n: int, what: str) -> bytes:
    if len(data) != n:
        raise EncodingOverflow(f"{what} must be exactly {n} bytes")
    return data


def _u8(v: int) -> bytes:
    if not 0 <= v <= 0xFF:
        raise EncodingOverflow("u8 out of range")
    return bytes((v,))


def _u16(v: int) -> bytes:
    if not 0 <= v <= 0xFFFF:
        raise EncodingOverflow("u16 out of range")
    return struct.pack("<H", v)


def _u32(v: int) -> bytes:
    if not 0 <= v <= 0xFFFFFFFF:
        raise EncodingOverflow("u32 out of range")
    return struct.pack("<I", v)


# -- message variants ----------------------------------------------------------


@dataclass(frozen=True)
class GetVersion:
    CODE = Code.GET_VERSION

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "GetVersion":
        return cls()


@dataclass(frozen=True)
class Version:
    CODE = Code.VERSION
    version_list: tuple[int, ...] = (PROTOCOL_V11,)

    def _body(self) -> bytes:
        return _u8(len(self.version_list)) + bytes(self.version_list)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Version":
        count = r.u8()
        return cls(version_list=tuple(r.take(count)))


@dataclass(frozen=True)
class GetCapabilities:
    CODE = Code.GET_CAPABILITIES
    flags: int = 0

    def _body(self) -> bytes:
        return _u32(self.flags)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "GetCapabilities":
        return cls(flags=r.u32())


@dataclass(frozen=True)
class Capabilities:
    CODE = Code.CAPABILITIES
    flags: int = 0
    ct_exponent: int = 0

    def _body(self) -> bytes:
        return _u32(self.flags) + _u8(self.ct_exponent)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Capabilities":
        return cls(flags=r.u32(), ct_exponent=r.u8())


def _menu_body(menu: AlgorithmMenu) -> bytes:
    parts = []
    for cat in menu.categories():
        parts.append(_u8(len(cat)))
        parts.append(bytes(cat))
    return b"".join(parts)


def _parse_menu(r: _Reader) -> AlgorithmMenu:
    cats = []
    for _ in range(6):
        count = r.u8()
        cats.append(tuple(r.take(count)))
    return AlgorithmMenu(*cats)


@dataclass(frozen=True)
class NegotiateAlgorithms:
    CODE = Code.NEGOTIATE_ALGORITHMS
    offered: AlgorithmMenu = AlgorithmMenu()

    def _body(self) -> bytes:
        return _menu_body(self.offered)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "NegotiateAlgorithms":
        return cls(offered=_parse_menu(r))


@dataclass(frozen=True)
class Algorithms:
    CODE = Code.ALGORITHMS
    selected: CryptoSuite = CryptoSuite()

    def _body(self) -> bytes:
        return bytes(self.selected.as_tuple())

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Algorithms":
        vals = r.take(6)
        return cls(selected=CryptoSuite(*vals))


@dataclass(frozen=True)
class GetDigests:
    CODE = Code.GET_DIGESTS

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "GetDigests":
        return cls()


@dataclass(frozen=True)
class Digests:
    CODE = Code.DIGESTS
    slot_mask: int = 0
    digest_list: tuple[bytes, ...] = ()

    def _body(self) -> bytes:
        parts = [_u8(self.slot_mask), _u8(len(self.digest_list))]
        parts += [_lp16(d) for d in self.digest_list]
        return b"".join(parts)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Digests":
        mask = r.u8()
        count = r.u8()
        return cls(slot_mask=mask,
                   digest_list=tuple(r.lp16() for _ in range(count)))


@dataclass(frozen=True)
class GetCertificate:
    CODE = Code.GET_CERTIFICATE
    slot: int = 0
    offset: int = 0
    req_length: int = 1024

    def _body(self) -> bytes:
        return _u8(self.slot) + _u32(self.offset) + _u32(self.req_length)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "GetCertificate":
        return cls(slot=r.u8(), offset=r.u32(), req_length=r.u32())


@dataclass(frozen=True)
class Certificate:
    CODE = Code.CERTIFICATE
    slot: int = 0
    portion: bytes = b""
    remainder_length: int = 0

    def _body(self) -> bytes:
        return _u8(self.slot) + _lp32(self.portion) + _u32(self.remainder_length)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Certificate":
        return cls(slot=r.u8(), portion=r.lp32(), remainder_length=r.u32())


@dataclass(frozen=True)
class Challenge:
    CODE = Code.CHALLENGE
    nonce: bytes = b"\x00" * NONCE_LEN
    summary_selector: int = 0
    slot: int = 0  # carried in header param1

    def _params(self) -> tuple[int, int]:
        return (self.slot, 0)

    def _body(self) -> bytes:
        return _fixed(self.nonce, NONCE_LEN, "nonce") + _u8(self.summary_selector)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Challenge":
        return cls(nonce=r.take(NONCE_LEN), summary_selector=r.u8(), slot=p1)


@dataclass(frozen=True)
class ChallengeAuth:
    CODE = Code.CHALLENGE_AUTH
    cert_chain_digest: bytes = b""
    nonce: bytes = b"\x00" * NONCE_LEN
    measurement_summary_digest: bytes = b""
    opaque: bytes = b""
    signature: bytes = b""
    mutual_auth_requested: bool = False  # carried in header param1

    def _params(self) -> tuple[int, int]:
        return (int(self.mutual_auth_requested), 0)

    def _body(self) -> bytes:
        return (_lp16(self.cert_chain_digest)
                + _fixed(self.nonce, NONCE_LEN, "nonce")
                + _lp16(self.measurement_summary_digest)
                + _lp16(self.opaque)
                + _lp16(self.signature))

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "ChallengeAuth":
        if p1 > 1:
            raise MalformedMessage("mutual-auth param must be 0 or 1")
        return cls(cert_chain_digest=r.lp16(), nonce=r.take(NONCE_LEN),
                   measurement_summary_digest=r.lp16(), opaque=r.lp16(),
                   signature=r.lp16(), mutual_auth_requested=bool(p1))

    def signed_prefix_len(self) -> int:
        """Length of header + body up to (excluding) the signature field."""
        return (HEADER_LEN + 2 + len(self.cert_chain_digest) + NONCE_LEN
                + 2 + len(self.measurement_summary_digest) + 2 + len(self.opaque))


@dataclass(frozen=True)
class GetMeasurements:
    CODE = Code.GET_MEASUREMENTS
    operand: int = MeasOperand.ALL
    nonce: bytes = b"\x00" * NONCE_LEN
    signature_requested: bool = False

    def _body(self) -> bytes:
        return (_u8(self.operand) + _fixed(self.nonce, NONCE_LEN, "nonce")
                + _u8(int(self.signature_requested)))

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "GetMeasurements":
        return cls(operand=r.u8(), nonce=r.take(NONCE_LEN),
                   signature_requested=r.flag())


@dataclass(frozen=True)
class MeasurementBlock:
    """DMTF-style measurement record: 1-based index, type tag, payload."""

    index: int
    block_type: int
    payload: bytes
    digest: bytes

    def _encode(self) -> bytes:
        return (_u8(self.index) + _u8(self.block_type)
                + _lp16(self.payload) + _lp16(self.digest))

    @classmethod
    def _decode(cls, r: _Reader) -> "MeasurementBlock":
        return cls(index=r.u8(), block_type=r.u8(),
                   payload=r.lp16(), digest=r.lp16())


@dataclass(frozen=True)
class Measurements:
    CODE = Code.MEASUREMENTS
    block_count: int = 0
    blocks: tuple[MeasurementBlock, ...] = ()
    nonce: bytes = b"\x00" * NONCE_LEN
    signature: bytes | None = None

    def _body(self) -> bytes:
        parts = [_u8(self.block_count), _u8(len(self.blocks))]
        parts += [b._encode() for b in self.blocks]
        parts.append(_fixed(self.nonce, NONCE_LEN, "nonce"))
        parts.append(_opt16(self.signature))
        return b"".join(parts)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Measurements":
        total = r.u8()
        present = r.u8()
        blocks = tuple(MeasurementBlock._decode(r) for _ in range(present))
        nonce = r.take(NONCE_LEN)
        sig = r.lp16() if r.flag() else None
        return cls(block_count=total, blocks=blocks, nonce=nonce, signature=sig)

    def signed_prefix_len(self) -> int:
        """Length of header + body up to (excluding) the signature option."""
        n = HEADER_LEN + 2
        for b in self.blocks:
            n += 2 + 2 + len(b.payload) + 2 + len(b.digest)
        return n + NONCE_LEN


@dataclass(frozen=True)
class KeyExchange:
    CODE = Code.KEY_EXCHANGE
    requester_random: bytes = b"\x00" * NONCE_LEN
    dhe_public: bytes = b""
    slot: int = 0
    session_half: int = 0  # requester's 16-bit session id half, in params

    def _params(self) -> tuple[int, int]:
        _u16(self.session_half)
        return (self.session_half & 0xFF, self.session_half >> 8)

    def _body(self) -> bytes:
        return (_fixed(self.requester_random, NONCE_LEN, "requester_random")
                + _lp16(self.dhe_public) + _u8(self.slot))

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "KeyExchange":
        return cls(requester_random=r.take(NONCE_LEN), dhe_public=r.lp16(),
                   slot=r.u8(), session_half=p1 | (p2 << 8))


@dataclass(frozen=True)
class KeyExchangeRsp:
    CODE = Code.KEY_EXCHANGE_RSP
    responder_random: bytes = b"\x00" * NONCE_LEN
    dhe_public: bytes = b""
    measurement_summary_digest: bytes = b""
    mutual_auth_requested: bool = False
    signature: bytes = b""
    verify_data: bytes = b""
    session_half: int = 0  # responder's 16-bit session id half, in params

    def _params(self) -> tuple[int, int]:
        _u16(self.session_half)
        return (self.session_half & 0xFF, self.session_half >> 8)

    def _body(self) -> bytes:
        return (_fixed(self.responder_random, NONCE_LEN, "responder_random")
                + _lp16(self.dhe_public)
                + _lp16(self.measurement_summary_digest)
                + _u8(int(self.mutual_auth_requested))
                + _lp16(self.signature)
                + _lp16(self.verify_data))

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "KeyExchangeRsp":
        return cls(responder_random=r.take(NONCE_LEN), dhe_public=r.lp16(),
                   measurement_summary_digest=r.lp16(),
                   mutual_auth_requested=r.flag(), signature=r.lp16(),
                   verify_data=r.lp16(), session_half=p1 | (p2 << 8))

    def signed_prefix_len(self) -> int:
        """Header + body through the mutual-auth flag: the TH1 cut."""
        return (HEADER_LEN + NONCE_LEN + 2 + len(self.dhe_public)
                + 2 + len(self.measurement_summary_digest) + 1)


@dataclass(frozen=True)
class Finish:
    CODE = Code.FINISH
    requester_signature: bytes | None = None
    verify_data: bytes = b""

    def _body(self) -> bytes:
        return _opt16(self.requester_signature) + _lp16(self.verify_data)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Finish":
        sig = r.lp16() if r.flag() else None
        return cls(requester_signature=sig, verify_data=r.lp16())

    def verify_prefix_len(self) -> int:
        """Header + signature option, excluding verify_data."""
        n = HEADER_LEN + 1
        if self.requester_signature is not None:
            n += 2 + len(self.requester_signature)
        return n


@dataclass(frozen=True)
class FinishRsp:
    CODE = Code.FINISH_RSP
    verify_data: bytes = b""

    def _body(self) -> bytes:
        return _lp16(self.verify_data)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "FinishRsp":
        return cls(verify_data=r.lp16())

    def verify_prefix_len(self) -> int:
        return HEADER_LEN


@dataclass(frozen=True)
class PskExchange:
    CODE = Code.PSK_EXCHANGE
    psk_hint: bytes = b""
    requester_context: bytes = b""
    session_half: int = 0

    def _params(self) -> tuple[int, int]:
        _u16(self.session_half)
        return (self.session_half & 0xFF, self.session_half >> 8)

    def _body(self) -> bytes:
        return _lp16(self.psk_hint) + _lp16(self.requester_context)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "PskExchange":
        return cls(psk_hint=r.lp16(), requester_context=r.lp16(),
                   session_half=p1 | (p2 << 8))


@dataclass(frozen=True)
class PskExchangeRsp:
    CODE = Code.PSK_EXCHANGE_RSP
    responder_context: bytes = b""
    verify_data: bytes = b""
    session_half: int = 0

    def _params(self) -> tuple[int, int]:
        _u16(self.session_half)
        return (self.session_half & 0xFF, self.session_half >> 8)

    def _body(self) -> bytes:
        return _lp16(self.responder_context) + _lp16(self.verify_data)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "PskExchangeRsp":
        return cls(responder_context=r.lp16(), verify_data=r.lp16(),
                   session_half=p1 | (p2 << 8))

    def signed_prefix_len(self) -> int:
        """Header + responder_context: the PSK TH1 cut (no signature here)."""
        return HEADER_LEN + 2 + len(self.responder_context)


@dataclass(frozen=True)
class PskFinish:
    CODE = Code.PSK_FINISH
    verify_data: bytes = b""

    def _body(self) -> bytes:
        return _lp16(self.verify_data)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "PskFinish":
        return cls(verify_data=r.lp16())

    def verify_prefix_len(self) -> int:
        return HEADER_LEN


@dataclass(frozen=True)
class PskFinishRsp:
    CODE = Code.PSK_FINISH_RSP

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "PskFinishRsp":
        return cls()


@dataclass(frozen=True)
class Heartbeat:
    CODE = Code.HEARTBEAT

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "Heartbeat":
        return cls()


@dataclass(frozen=True)
class HeartbeatAck:
    CODE = Code.HEARTBEAT_ACK

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "HeartbeatAck":
        return cls()


@dataclass(frozen=True)
class KeyUpdate:
    CODE = Code.KEY_UPDATE
    op: int = KeyUpdateOp.UPDATE_KEY

    def _body(self) -> bytes:
        if self.op not in (KeyUpdateOp.UPDATE_KEY, KeyUpdateOp.UPDATE_ALL_KEYS,
                           KeyUpdateOp.VERIFY_NEW_KEY):
            raise EncodingOverflow(f"unknown key-update op {self.op}")
        return _u8(self.op)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "KeyUpdate":
        op = r.u8()
        try:
            op = KeyUpdateOp(op)
        except ValueError:
            raise MalformedMessage(f"unknown key-update op {op}") from None
        return cls(op=op)


@dataclass(frozen=True)
class KeyUpdateAck:
    CODE = Code.KEY_UPDATE_ACK

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "KeyUpdateAck":
        return cls()


@dataclass(frozen=True)
class EndSession:
    CODE = Code.END_SESSION

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "EndSession":
        return cls()


@dataclass(frozen=True)
class EndSessionAck:
    CODE = Code.END_SESSION_ACK

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "EndSessionAck":
        return cls()


@dataclass(frozen=True)
class GetEncapsulatedRequest:
    CODE = Code.GET_ENCAPSULATED_REQUEST

    def _body(self) -> bytes:
        return b""

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "GetEncapsulatedRequest":
        return cls()


@dataclass(frozen=True)
class EncapsulatedRequest:
    CODE = Code.ENCAPSULATED_REQUEST
    inner: bytes = b""  # a full encoded message

    def _body(self) -> bytes:
        return _lp32(self.inner)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "EncapsulatedRequest":
        return cls(inner=r.lp32())


@dataclass(frozen=True)
class DeliverEncapsulatedResponse:
    CODE = Code.DELIVER_ENCAPSULATED_RESPONSE
    inner: bytes = b""

    def _body(self) -> bytes:
        return _lp32(self.inner)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "DeliverEncapsulatedResponse":
        return cls(inner=r.lp32())


@dataclass(frozen=True)
class EncapsulatedResponseAck:
    CODE = Code.ENCAPSULATED_RESPONSE_ACK
    inner: bytes | None = None

    def _body(self) -> bytes:
        return _opt32(self.inner)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "EncapsulatedResponseAck":
        return cls(inner=r.lp32() if r.flag() else None)


@dataclass(frozen=True)
class ErrorMessage:
    CODE = Code.ERROR
    code: int = ErrorCode.INVALID_REQUEST
    detail: bytes = b""

    def _body(self) -> bytes:
        try:
            ErrorCode(self.code)
        except ValueError:
            raise EncodingOverflow(f"unknown error code {self.code}") from None
        return _u8(self.code) + _lp16(self.detail)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "ErrorMessage":
        code = r.u8()
        try:
            code = ErrorCode(code)
        except ValueError:
            raise MalformedMessage(f"unknown error code {code}") from None
        return cls(code=code, detail=r.lp16())


@dataclass(frozen=True)
class AppData:
    CODE = Code.APP_DATA
    payload: bytes = b""

    def _body(self) -> bytes:
        return _lp32(self.payload)

    @classmethod
    def _parse(cls, r: _Reader, p1: int, p2: int) -> "AppData":
        return cls(payload=r.lp32())


MESSAGE_TYPES = {
    cls.CODE: cls
    for cls in (
        GetVersion, Version, GetCapabilities, Capabilities,
        NegotiateAlgorithms, Algorithms, GetDigests, Digests,
        GetCertificate, Certificate, Challenge, ChallengeAuth,
        GetMeasurements, Measurements, KeyExchange, KeyExchangeRsp,
        Finish, FinishRsp, PskExchange, PskExchangeRsp, PskFinish,
        PskFinishRsp, Heartbeat, HeartbeatAck, KeyUpdate, KeyUpdateAck,
        EndSession, EndSessionAck, GetEncapsulatedRequest,
        EncapsulatedRequest, DeliverEncapsulatedResponse,
        EncapsulatedResponseAck, ErrorMessage, AppData,
    )
}

SpdmMessage = (
    GetVersion | Version | GetCapabilities | Capabilities
    | NegotiateAlgorithms | Algorithms | GetDigests | Digests
    | GetCertificate | Certificate | Challenge | ChallengeAuth
    | GetMeasurements | Measurements | KeyExchange | KeyExchangeRsp
    | Finish | FinishRsp | PskExchange | PskExchangeRsp | PskFinish
    | PskFinishRsp | Heartbeat | HeartbeatAck | KeyUpdate | KeyUpdateAck
    | EndSession | EndSessionAck | GetEncapsulatedRequest
    | EncapsulatedRequest | DeliverEncapsulatedResponse
    | EncapsulatedResponseAck | ErrorMessage | AppData
)


def encode_message(msg, version: int = PROTOCOL_V11) -> bytes:
    """Deterministic encoding: header, then the variant body."""
    if version not in SUPPORTED_WIRE_VERSIONS:
        raise VersionMismatch(f"unsupported version byte {version:#x}")
    params = msg._params() if hasattr(msg, "_params") else (0, 0)
    return bytes((version, msg.CODE, params[0], params[1])) + msg._body()


def decode_message(data: bytes):
    """Exact inverse of encode_message on its image; rejects trailing bytes."""
    if len(data) < HEADER_LEN:
        raise MalformedMessage("shorter than header")
    version, code, p1, p2 = data[0], data[1], data[2], data[3]
    if version not in SUPPORTED_WIRE_VERSIONS:
        raise VersionMismatch(f"unknown version byte {version:#x}")
    cls = MESSAGE_TYPES.get(code)
    if cls is None:
        raise UnsupportedRequest(f"unknown code byte {code:#x}")
    r = _Reader(data, HEADER_LEN)
    msg = cls._parse(r, p1, p2)
    r.done()
    return msg


# -- secured records -----------------------------------------------------------


@dataclass(frozen=True)
class SecuredRecord:
    """AEAD-protected envelope for in-session traffic.

    The associated data is exactly the 16-byte record header as laid out
    on the wire; seq_num is explicit so replay behaviour is observable at
    the codec level.
    """

    session_id: int
    seq_num: int
    ciphertext_and_tag: bytes

    def header_bytes(self) -> bytes:
        return struct.pack("<IQI", self.session_id, self.seq_num,
                           len(self.ciphertext_and_tag))


def encode_secured_record(rec: SecuredRecord) -> bytes:
    if not 0 <= rec.session_id <= 0xFFFFFFFF:
        raise EncodingOverflow("session_id out of range")
    if not 0 <= rec.seq_num <= 0xFFFFFFFFFFFFFFFF:
        raise EncodingOverflow("seq_num out of range")
    if len(rec.ciphertext_and_tag) > 0xFFFFFFFF:
        raise EncodingOverflow("ciphertext too long")
    return rec.header_bytes() + rec.ciphertext_and_tag


def decode_secured_record(data: bytes) -> SecuredRecord:
    if len(data) < RECORD_HEADER_LEN:
        raise MalformedMessage("record shorter than header")
    session_id, seq_num, ct_len = struct.unpack_from("<IQI", data)
    body = data[RECORD_HEADER_LEN:]
    if len(body) != ct_len:
        raise MalformedMessage("ciphertext_length inconsistent with body")
    return SecuredRecord(session_id=session_id, seq_num=seq_num,
                         ciphertext_and_tag=body)


# -- transport frames ----------------------------------------------------------


def frame_plain(encoded_message: bytes) -> bytes:
    return bytes((FRAME_PLAIN,)) + encoded_message


def frame_secured(encoded_record: bytes) -> bytes:
    return bytes((FRAME_SECURED,)) + encoded_record


def frame_app_plain(payload: bytes) -> bytes:
    return bytes((FRAME_APP_PLAIN,)) + payload


def parse_frame(frame: bytes) -> tuple[int, bytes]:
    if not frame:
        raise MalformedMessage("empty frame")
    kind = frame[0]
    if kind not in (FRAME_PLAIN, FRAME_SECURED, FRAME_APP_PLAIN):
        raise MalformedMessage(f"unknown frame discriminator {kind:#x}")
    return kind, frame[1:]
