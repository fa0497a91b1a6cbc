"""Transcript management, key schedule, and the secured-record layer.

The key schedule is an HKDF ladder (frozen in docs/key-schedule.md):

    early            = HKDF-Extract(salt=0^hlen, ikm = DHE secret | PSK)
    hs_secret[dir]   = HKDF-Expand(early,  "hs "   + dir + TH1, hlen)
    master           = HKDF-Extract(salt=HKDF-Expand(early, "derived", hlen), 0^hlen)
    data_secret[dir] = HKDF-Expand(master, "data " + dir + TH2, hlen)

with per-secret key/iv/finished expansions ("key", "iv", "fin"). Key
update replaces a data key with HKDF-Expand(old_key, "upd", 32); IVs and
sequence counters are never reset, so (generation, nonce) pairs stay
unique for the session's lifetime.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum

from .crypto import AEAD_KEY_LEN, AEAD_NONCE_LEN, CryptoProvider
from .errors import (
    InvalidPhase,
    MissingHandshakeSecret,
    ReplayDetected,
    SequenceExhausted,
    SequenceGap,
    UnknownCheckpoint,
)
from .wire import SecuredRecord

# Test builds flip this to allow SessionState.export_secrets().
SECRETS_EXPORT_ENABLED = False

_MAX_SEQ = 0xFFFFFFFFFFFFFFFF


class Direction(IntEnum):
    """Traffic direction: who is sending."""

    REQUESTER = 0
    RESPONDER = 1

    @property
    def label(self) -> bytes:
        return b"req" if self is Direction.REQUESTER else b"rsp"


class SessionPhase(Enum):
    HANDSHAKING = "handshaking"
    ESTABLISHED = "established"
    TERMINATED = "terminated"


# Named transcript checkpoints.
CK_VCA = "vca"
CK_TH1 = "th1"
CK_TH2 = "th2"


class TranscriptLog:
    """Append-only byte log of encoded messages with named checkpoints."""

    def __init__(self):
        self._buf = bytearray()
        self._marks: dict[str, int] = {}

    def append(self, data: bytes) -> None:
        self._buf += data

    def mark(self, name: str) -> int:
        pos = len(self._buf)
        self._marks[name] = pos
        return pos

    @property
    def position(self) -> int:
        return len(self._buf)

    def checkpoint_position(self, name: str) -> int:
        try:
            return self._marks[name]
        except KeyError:
            raise UnknownCheckpoint(name) from None

    def hash_prefix(self, provider: CryptoProvider, end: int | None = None) -> bytes:
        end = len(self._buf) if end is None else end
        return provider.hash(bytes(self._buf[:end]))


def transcript_hash(provider: CryptoProvider, log: TranscriptLog, checkpoint: str) -> bytes:
    """Hash of the log prefix at a named checkpoint."""
    return log.hash_prefix(provider, log.checkpoint_position(checkpoint))


@dataclass
class DirectionKeys:
    key: bytes
    iv: bytes
    finished_key: bytes
    generation: int = 0


@dataclass
class SessionSecrets:
    """Both endpoints derive field-by-field identical values on success."""

    handshake_secret: bytes
    th1: bytes
    handshake: dict[Direction, DirectionKeys]
    master_secret: bytes
    th2: bytes | None = None
    data: dict[Direction, DirectionKeys] = field(default_factory=dict)


def _expand_direction(provider: CryptoProvider, secret: bytes) -> DirectionKeys:
    return DirectionKeys(
        key=provider.hkdf_expand(secret, b"key", AEAD_KEY_LEN),
        iv=provider.hkdf_expand(secret, b"iv", AEAD_NONCE_LEN),
        finished_key=provider.hkdf_expand(secret, b"fin", provider.suite.hash_len),
    )


def derive_handshake_secrets(provider: CryptoProvider, input_secret: bytes,
                             th1: bytes) -> SessionSecrets:
    """Key-schedule stage 1: handshake traffic keys bound to TH1."""
    if not input_secret:
        raise MissingHandshakeSecret("empty input secret")
    hlen = provider.suite.hash_len
    early = provider.hkdf_extract(b"\x00" * hlen, input_secret)
    handshake = {
        d: _expand_direction(
            provider, provider.hkdf_expand(early, b"hs " + d.label + th1, hlen))
        for d in Direction
    }
    derived = provider.hkdf_expand(early, b"derived", hlen)
    master = provider.hkdf_extract(derived, b"\x00" * hlen)
    return SessionSecrets(handshake_secret=early, th1=th1,
                          handshake=handshake, master_secret=master)


def derive_data_secrets(provider: CryptoProvider, secrets: SessionSecrets,
                        th2: bytes) -> SessionSecrets:
    """Key-schedule stage 2: data traffic keys, fixed once FINISH completes."""
    if not secrets.handshake:
        raise MissingHandshakeSecret("handshake secrets not derived")
    hlen = provider.suite.hash_len
    secrets.th2 = th2
    secrets.data = {
        d: _expand_direction(
            provider,
            provider.hkdf_expand(secrets.master_secret, b"data " + d.label + th2, hlen))
        for d in Direction
    }
    return secrets


def compute_verify_data(provider: CryptoProvider, secrets: SessionSecrets,
                        direction: Direction, log: TranscriptLog,
                        checkpoint: str) -> bytes:
    """HMAC(finished_key[direction], transcript hash at checkpoint)."""
    if not secrets.handshake:
        raise MissingHandshakeSecret("handshake secrets not derived")
    return provider.hmac(secrets.handshake[direction].finished_key,
                         transcript_hash(provider, log, checkpoint))


def _nonce_for(iv: bytes, seq: int) -> bytes:
    # TLS-1.3 style: seq left-padded to the IV length, XORed in.
    return (int.from_bytes(iv, "big") ^ seq).to_bytes(len(iv), "big")


class SessionState:
    """Single-owner per-endpoint session: keys, phase, sequence counters."""

    def __init__(self, session_id: int, secrets: SessionSecrets,
                 provider: CryptoProvider):
        self.session_id = session_id
        self.secrets = secrets
        self.provider = provider
        self.phase = SessionPhase.HANDSHAKING
        self.seq_out = {Direction.REQUESTER: 0, Direction.RESPONDER: 0}
        self.seq_in = {Direction.REQUESTER: 0, Direction.RESPONDER: 0}

    def _keys(self, direction: Direction) -> DirectionKeys:
        if self.phase is SessionPhase.TERMINATED or self.secrets is None:
            raise InvalidPhase("session terminated")
        if self.phase is SessionPhase.HANDSHAKING:
            return self.secrets.handshake[direction]
        keys = self.secrets.data.get(direction)
        if keys is None:
            raise MissingHandshakeSecret("data secrets not derived")
        return keys

    def establish(self) -> None:
        if self.phase is not SessionPhase.HANDSHAKING:
            raise InvalidPhase(f"cannot establish from {self.phase}")
        self.phase = SessionPhase.ESTABLISHED

    def terminate(self) -> None:
        """Terminated sessions refuse all record operations; keys erased."""
        self.phase = SessionPhase.TERMINATED
        self.secrets = None

    def seal_record(self, direction: Direction, plaintext: bytes) -> SecuredRecord:
        keys = self._keys(direction)
        seq = self.seq_out[direction]
        if seq >= _MAX_SEQ:
            raise SequenceExhausted("outbound sequence number would wrap")
        header = struct.pack("<IQI", self.session_id, seq, len(plaintext) + 16)
        ct = self.provider.aead_seal(keys.key, _nonce_for(keys.iv, seq),
                                     header, plaintext)
        self.seq_out[direction] = seq + 1
        return SecuredRecord(session_id=self.session_id, seq_num=seq,
                             ciphertext_and_tag=ct)

    def open_record(self, direction: Direction, rec: SecuredRecord) -> bytes:
        keys = self._keys(direction)
        expected = self.seq_in[direction]
        if rec.seq_num < expected:
            raise ReplayDetected(f"seq {rec.seq_num} already accepted")
        if rec.seq_num > expected:
            raise SequenceGap(f"seq {rec.seq_num}, expected {expected}")
        plaintext = self.provider.aead_open(
            keys.key, _nonce_for(keys.iv, rec.seq_num),
            rec.header_bytes(), rec.ciphertext_and_tag)
        self.seq_in[direction] = expected + 1
        return plaintext

    def update_keys(self, op, direction: Direction) -> SessionSecrets:
        """Replace data key(s): new = HKDF-Expand(old, "upd", 32)."""
        from .wire import KeyUpdateOp
        if self.phase is not SessionPhase.ESTABLISHED:
            raise InvalidPhase("key update requires an established session")
        if op == KeyUpdateOp.UPDATE_ALL_KEYS:
            dirs = list(Direction)
        elif op == KeyUpdateOp.UPDATE_KEY:
            dirs = [direction]
        else:
            raise InvalidPhase(f"not an update op: {op}")
        for d in dirs:
            keys = self.secrets.data[d]
            keys.key = self.provider.hkdf_expand(keys.key, b"upd", AEAD_KEY_LEN)
            keys.generation += 1
        return self.secrets

    def export_secrets(self) -> dict:
        """Test hook: full key material; gated behind a module flag."""
        if not SECRETS_EXPORT_ENABLED:
            raise RuntimeError("secrets export is disabled "
                               "(set session.SECRETS_EXPORT_ENABLED)")
        out = {
            "session_id": self.session_id,
            "handshake_secret": self.secrets.handshake_secret,
            "th1": self.secrets.th1,
            "th2": self.secrets.th2,
            "master_secret": self.secrets.master_secret,
        }
        for name, table in (("hs", self.secrets.handshake), ("data", self.secrets.data)):
            for d, keys in table.items():
                prefix = f"{name}.{d.name.lower()}"
                out[prefix + ".key"] = keys.key
                out[prefix + ".iv"] = keys.iv
                out[prefix + ".fin"] = keys.finished_key
                out[prefix + ".gen"] = keys.generation
        return out
