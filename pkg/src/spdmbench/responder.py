"""Server-side state machine: request dispatch, ordering rules, identity
serving, session establishment, and in-session application routing.

Every incoming frame yields exactly one response frame; failures are
encoded Error messages, never exceptions to the caller. Handlers append
request and response bytes to the shared transcript with the partial-
append discipline: a message carrying a signature or verify_data is
appended up to the covered prefix first, the value is computed over the
log at that point, then the remaining field bytes follow.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from . import crypto, wire
from .crypto import CertificateChain, CryptoProvider, CryptoSuite
from .errors import (
    DecryptError,
    DuplicateOpcode,
    InvalidPhase,
    InvalidPoint,
    InvalidSlot,
    MalformedMessage,
    NonContiguousMeasurementIndex,
    ReplayDetected,
    SequenceGap,
    SignatureInvalid,
    SpdmError,
    UnsupportedRequest,
    VersionMismatch,
)
from .session import (
    CK_TH1,
    CK_TH2,
    CK_VCA,
    Direction,
    SessionPhase,
    SessionState,
    TranscriptLog,
    compute_verify_data,
    derive_data_secrets,
    derive_handshake_secrets,
)

# Capability flag bits (GET_CAPABILITIES / CAPABILITIES).
CAP_CERT = 0x0001
CAP_CHALLENGE = 0x0002
CAP_MEAS = 0x0004
CAP_MEAS_SIG = 0x0008
CAP_KEY_EXCHANGE = 0x0010
CAP_PSK = 0x0020
CAP_MUTUAL_AUTH = 0x0040
CAP_ENCAP = 0x0080
CAP_HEARTBEAT = 0x0100
CAP_KEY_UPDATE = 0x0200

DEFAULT_CAPS = (CAP_CERT | CAP_CHALLENGE | CAP_MEAS | CAP_MEAS_SIG
                | CAP_KEY_EXCHANGE | CAP_PSK | CAP_MUTUAL_AUTH | CAP_ENCAP
                | CAP_HEARTBEAT | CAP_KEY_UPDATE)

MAX_SLOTS = 8
DEFAULT_MEASUREMENT_COUNT = 5
DEFAULT_MEASUREMENT_SIZE = 128
DMTF_BLOCK_TYPE_FIRMWARE = 0x01

# Responder phases mirror the requester's negotiation ladder.
_RESET, _VERSION_AGREED, _CAPS_KNOWN, _ALGS_AGREED = range(4)


def make_default_measurements(count: int = DEFAULT_MEASUREMENT_COUNT,
                              size: int = DEFAULT_MEASUREMENT_SIZE):
    """Deterministic fixture: block i holds `size` bytes of value i."""
    return tuple((i, DMTF_BLOCK_TYPE_FIRMWARE, bytes([i]) * size)
                 for i in range(1, count + 1))


@dataclass
class ResponderConfig:
    supported_versions: tuple[int, ...] = (wire.PROTOCOL_V10, wire.PROTOCOL_V11)
    capability_flags: int = DEFAULT_CAPS
    algorithm_menu: crypto.AlgorithmMenu = crypto.DEFAULT_MENU
    # slot -> (CertificateChain, leaf private key)
    slots: dict = field(default_factory=dict)
    # (index, block_type, payload) triples, indices contiguous from 1
    measurements: tuple = make_default_measurements()
    psk_table: dict = field(default_factory=dict)
    trusted_requester_roots: tuple = ()
    mutual_auth: bool = True
    mutual_auth_slot: int = 0
    cert_chunk_size: int = 1024
    opaque: bytes = b""
    ct_exponent: int = 0
    max_sessions: int = 4
    session_timeout: float | None = None  # no default timeout
    rng_seed: int | None = None
    instrument: bool = False


def _validate_slots(slots) -> None:
    for slot in slots:
        if not 0 <= slot < MAX_SLOTS:
            raise InvalidSlot(f"slot {slot} outside 0..{MAX_SLOTS - 1}")


def _validate_measurements(measurements) -> None:
    indices = [m[0] for m in measurements]
    if indices != list(range(1, len(indices) + 1)):
        raise NonContiguousMeasurementIndex(f"indices {indices}")


class IdentityServer:
    """Serves one party's digests, certificate portions, and challenges.

    Used by the responder for its own identity and by the requester when
    it answers encapsulated mutual-authentication requests.
    """

    def __init__(self, provider: CryptoProvider, chains: dict, sig_algo: int,
                 mutual_auth: bool = False, opaque: bytes = b"",
                 summary_fn=None):
        self.provider = provider
        self.chains = chains  # slot -> (CertificateChain, private key)
        self.sig_algo = sig_algo
        self.mutual_auth = mutual_auth
        self.opaque = opaque
        self.summary_fn = summary_fn

    def slot_mask(self) -> int:
        mask = 0
        for slot in self.chains:
            mask |= 1 << slot
        return mask

    def digest_for(self, slot: int) -> bytes:
        chain, _ = self.chains[slot]
        return self.provider.hash(chain.serialize())

    def serve_digests(self, raw: bytes, log: TranscriptLog, version: int) -> bytes:
        log.append(raw)
        digests = tuple(self.digest_for(s) for s in sorted(self.chains))
        rsp = wire.encode_message(
            wire.Digests(slot_mask=self.slot_mask(), digest_list=digests), version)
        log.append(rsp)
        return rsp

    def serve_certificate(self, msg: wire.GetCertificate, raw: bytes,
                          log: TranscriptLog, version: int) -> bytes:
        if msg.slot not in self.chains:
            raise InvalidSlot(f"slot {msg.slot} not provisioned")
        blob = self.chains[msg.slot][0].serialize()
        if msg.offset > len(blob):
            raise MalformedMessage("certificate offset beyond chain")
        log.append(raw)
        portion = blob[msg.offset:msg.offset + msg.req_length]
        remainder = len(blob) - msg.offset - len(portion)
        rsp = wire.encode_message(
            wire.Certificate(slot=msg.slot, portion=portion,
                             remainder_length=remainder), version)
        log.append(rsp)
        return rsp

    def serve_challenge(self, msg: wire.Challenge, raw: bytes,
                        log: TranscriptLog, version: int) -> bytes:
        if msg.slot not in self.chains:
            raise InvalidSlot(f"slot {msg.slot} not provisioned")
        log.append(raw)
        summary = b""
        if self.summary_fn is not None and msg.summary_selector:
            summary = self.summary_fn()
        rsp = wire.ChallengeAuth(
            cert_chain_digest=self.digest_for(msg.slot),
            nonce=self.provider.random_bytes(wire.NONCE_LEN),
            measurement_summary_digest=summary,
            opaque=self.opaque,
            signature=b"",
            mutual_auth_requested=self.mutual_auth,
        )
        raw0 = wire.encode_message(rsp, version)
        prefix = raw0[:rsp.signed_prefix_len()]
        log.append(prefix)
        sig = self.provider.sign(self.chains[msg.slot][1],
                                 log.hash_prefix(self.provider), self.sig_algo)
        full_raw = wire.encode_message(replace(rsp, signature=sig), version)
        log.append(full_raw[len(prefix):])
        return full_raw


class _EncapAuthDriver:
    """Verifies the peer identity over encapsulated digest/cert/challenge."""

    def __init__(self, provider: CryptoProvider, trusted_roots: tuple,
                 sig_algo: int, chunk_size: int, version: int):
        self.provider = provider
        self.trusted_roots = trusted_roots
        self.sig_algo = sig_algo
        self.chunk = chunk_size
        self.version = version
        self.log = TranscriptLog()
        self.slot = None
        self.expected_digest = None
        self.portions = bytearray()
        self.offset = 0
        self.nonce = None
        self.leaf_key = None  # set when authentication completes
        self.stage = "digests"

    def next_request(self) -> bytes | None:
        if self.stage == "digests":
            msg = wire.GetDigests()
        elif self.stage == "cert":
            msg = wire.GetCertificate(slot=self.slot, offset=self.offset,
                                      req_length=self.chunk)
        elif self.stage == "challenge":
            self.nonce = self.provider.random_bytes(wire.NONCE_LEN)
            msg = wire.Challenge(nonce=self.nonce, summary_selector=0,
                                 slot=self.slot)
        else:
            return None
        raw = wire.encode_message(msg, self.version)
        self.log.append(raw)
        return raw

    def feed(self, inner_raw: bytes) -> None:
        msg = wire.decode_message(inner_raw)
        if self.stage == "digests":
            if not isinstance(msg, wire.Digests) or not msg.digest_list:
                raise MalformedMessage("expected Digests with entries")
            self.log.append(inner_raw)
            mask = msg.slot_mask
            self.slot = (mask & -mask).bit_length() - 1 if mask else 0
            self.expected_digest = msg.digest_list[0]
            self.stage = "cert"
        elif self.stage == "cert":
            if not isinstance(msg, wire.Certificate):
                raise MalformedMessage("expected Certificate")
            self.log.append(inner_raw)
            self.portions += msg.portion
            self.offset += len(msg.portion)
            if msg.remainder_length == 0:
                blob = bytes(self.portions)
                if self.provider.hash(blob) != self.expected_digest:
                    raise SignatureInvalid("peer chain digest mismatch")
                chain = CertificateChain.from_serialized(self.slot, blob)
                for root in self.trusted_roots:
                    if chain.root() == root:
                        self.leaf_key = crypto.verify_certificate_chain(chain, root)
                        break
                else:
                    raise SignatureInvalid("peer chain root untrusted")
                self.stage = "challenge"
        elif self.stage == "challenge":
            if not isinstance(msg, wire.ChallengeAuth):
                raise MalformedMessage("expected ChallengeAuth")
            prefix_len = msg.signed_prefix_len()
            self.log.append(inner_raw[:prefix_len])
            digest = self.log.hash_prefix(self.provider)
            if not self.provider.verify(self.leaf_key, digest, msg.signature,
                                        self.sig_algo):
                self.leaf_key = None
                raise SignatureInvalid("peer challenge signature invalid")
            self.log.append(inner_raw[prefix_len:])
            self.stage = "done"
        else:
            raise MalformedMessage("encapsulated flow already complete")

    @property
    def done(self) -> bool:
        return self.stage == "done"


@dataclass
class _SessionEntry:
    state: SessionState
    kind: str  # "dhe" | "psk"
    mutual_required: bool = False
    pending_update: int | None = None  # op applied after the ack goes out


class Responder:
    """One responder context per transport connection."""

    def __init__(self, cfg: ResponderConfig):
        _validate_slots(cfg.slots)
        _validate_measurements(cfg.measurements)
        self.cfg = cfg
        self.provider = CryptoProvider(crypto.DEFAULT_SUITE, seed=cfg.rng_seed)
        self.phase = _RESET
        self.version = wire.PROTOCOL_V11
        self.suite: CryptoSuite | None = None
        self.transcript = TranscriptLog()
        self.meas_log = TranscriptLog()
        self.requester_flags = 0
        self.sessions: dict[int, _SessionEntry] = {}
        self.app_handlers: dict[int, object] = {}
        self.requester_leaf_key = None  # learned via mutual authentication
        self._encap_auth: _EncapAuthDriver | None = None
        self._encap_updates: dict[int, int] = {}  # session_id -> pending op
        self._serving = False
        self.timings: dict[str, list[float]] = {}
        self._identity = IdentityServer(
            self.provider, cfg.slots, crypto.DEFAULT_SUITE.responder_sig,
            mutual_auth=False, opaque=cfg.opaque,
            summary_fn=self._measurement_summary)

    # -- provisioning ----------------------------------------------------------

    def provision(self, certificates=None, measurements=None, psk_entries=None):
        """Mutate fixtures before serving begins."""
        if self._serving:
            raise InvalidPhase("provision before serving begins")
        if certificates is not None:
            _validate_slots(certificates)
            self.cfg.slots.update(certificates)
        if measurements is not None:
            _validate_measurements(measurements)
            self.cfg.measurements = tuple(measurements)
        if psk_entries is not None:
            self.cfg.psk_table.update(psk_entries)
        return self.cfg

    def register_app_handler(self, opcode: int, handler) -> None:
        if opcode in self.app_handlers:
            raise DuplicateOpcode(f"opcode {opcode:#x} already registered")
        self.app_handlers[opcode] = handler

    def request_key_update(self, session_id: int, op: int) -> None:
        """Queue a responder-initiated key update; delivered over the
        encapsulated mechanism next time the requester polls in-session."""
        if session_id not in self.sessions:
            raise InvalidPhase(f"no session {session_id:#x}")
        self._encap_updates[session_id] = op

    # -- helpers ---------------------------------------------------------------

    def _measurement_summary(self) -> bytes:
        digests = b"".join(self.provider.hash(payload)
                           for _, _, payload in self.cfg.measurements)
        return self.provider.hash(digests)

    def _measurement_blocks(self, indices) -> tuple[wire.MeasurementBlock, ...]:
        fixtures = self.cfg.measurements
        return tuple(
            wire.MeasurementBlock(index=idx, block_type=btype, payload=payload,
                                  digest=self.provider.hash(payload))
            for idx, btype, payload in (fixtures[i - 1] for i in indices))

    def _error(self, code: int, detail: bytes = b"") -> bytes:
        return wire.frame_plain(wire.encode_message(
            wire.ErrorMessage(code=code, detail=detail), self.version))

    def _rekey_provider(self, suite: CryptoSuite) -> None:
        self.provider = self.provider.with_suite(suite)
        self._identity.provider = self.provider
        self._identity.sig_algo = suite.responder_sig

    # -- top-level dispatch ------------------------------------------------------

    def handle_message(self, raw: bytes) -> bytes:
        """Decode, enforce ordering, dispatch; always returns a response."""
        self._serving = True
        start = time.perf_counter() if self.cfg.instrument else 0.0
        label = None
        try:
            kind, payload = wire.parse_frame(raw)
        except MalformedMessage:
            return self._error(wire.ErrorCode.INVALID_REQUEST, b"frame")
        try:
            if kind == wire.FRAME_PLAIN:
                label, response = self._handle_plain(payload)
            elif kind == wire.FRAME_SECURED:
                label, response = self._handle_secured(payload)
            else:
                label, response = self._handle_app_plain(payload)
        except SpdmError as exc:
            response = self._error(wire.ErrorCode.INVALID_REQUEST,
                                   type(exc).__name__.encode())
        if self.cfg.instrument and label is not None:
            self.timings.setdefault(label, []).append(time.perf_counter() - start)
        return response

    def serve(self, endpoint, stop=None, poll: float = 0.05) -> None:
        """Blocking request/response loop until the channel closes."""
        from .errors import ChannelClosed, TransportTimeout
        while stop is None or not stop.is_set():
            try:
                raw = endpoint.recv_msg(timeout=poll)
            except TransportTimeout:
                continue
            except ChannelClosed:
                return
            try:
                endpoint.send_msg(self.handle_message(raw))
            except ChannelClosed:
                return

    # -- plaintext dispatch --------------------------------------------------------

    _MIN_PHASE = {
        wire.GetCapabilities: _VERSION_AGREED,
        wire.NegotiateAlgorithms: _CAPS_KNOWN,
        wire.GetDigests: _ALGS_AGREED,
        wire.GetCertificate: _ALGS_AGREED,
        wire.Challenge: _ALGS_AGREED,
        wire.GetMeasurements: _ALGS_AGREED,
        wire.KeyExchange: _ALGS_AGREED,
        wire.PskExchange: _ALGS_AGREED,
        wire.GetEncapsulatedRequest: _ALGS_AGREED,
        wire.DeliverEncapsulatedResponse: _ALGS_AGREED,
    }

    def _handle_plain(self, raw: bytes):
        try:
            msg = wire.decode_message(raw)
        except VersionMismatch:
            return "undecodable", self._error(wire.ErrorCode.VERSION_MISMATCH)
        except UnsupportedRequest:
            return "undecodable", self._error(wire.ErrorCode.UNSUPPORTED_REQUEST)
        except MalformedMessage:
            return "undecodable", self._error(wire.ErrorCode.INVALID_REQUEST)
        label = wire.Code(msg.CODE).name
        if isinstance(msg, wire.GetVersion):
            return label, self._serve_get_version(raw)
        if raw[0] not in self.cfg.supported_versions:
            return label, self._error(wire.ErrorCode.VERSION_MISMATCH)
        min_phase = self._MIN_PHASE.get(type(msg))
        if min_phase is None:
            return label, self._error(wire.ErrorCode.UNEXPECTED_REQUEST,
                                      b"not-a-request")
        if self.phase < min_phase:
            return label, self._error(wire.ErrorCode.UNEXPECTED_REQUEST,
                                      b"out-of-order")
        handler = {
            wire.GetCapabilities: self._serve_capabilities,
            wire.NegotiateAlgorithms: self._serve_algorithms,
            wire.GetDigests: self._serve_digests,
            wire.GetCertificate: self._serve_certificate,
            wire.Challenge: self._serve_challenge,
            wire.GetMeasurements: self._serve_measurements,
            wire.KeyExchange: self._serve_key_exchange,
            wire.PskExchange: self._serve_psk_exchange,
            wire.GetEncapsulatedRequest: self._serve_get_encapsulated,
            wire.DeliverEncapsulatedResponse: self._serve_deliver_encapsulated,
        }[type(msg)]
        try:
            return label, wire.frame_plain(handler(msg, raw))
        except InvalidSlot:
            return label, self._error(wire.ErrorCode.INVALID_REQUEST, b"slot")
        except InvalidPoint:
            return label, self._error(wire.ErrorCode.INVALID_REQUEST, b"dhe-point")
        except (MalformedMessage, SignatureInvalid) as exc:
            return label, self._error(wire.ErrorCode.INVALID_REQUEST,
                                      type(exc).__name__.encode())

    def _serve_get_version(self, raw: bytes) -> bytes:
        # Soft reset of negotiation state; active sessions survive.
        self.transcript = TranscriptLog()
        self.meas_log = TranscriptLog()
        self.phase = _VERSION_AGREED
        self.version = wire.PROTOCOL_V11
        self.suite = None
        self._encap_auth = None
        self.transcript.append(raw)
        rsp = wire.encode_message(
            wire.Version(version_list=self.cfg.supported_versions),
            wire.PROTOCOL_V11)
        self.transcript.append(rsp)
        return wire.frame_plain(rsp)

    def _serve_capabilities(self, msg: wire.GetCapabilities, raw: bytes) -> bytes:
        self.version = raw[0]
        self.transcript.append(raw)
        self.requester_flags = msg.flags
        rsp = wire.encode_message(
            wire.Capabilities(flags=self.cfg.capability_flags,
                              ct_exponent=self.cfg.ct_exponent), self.version)
        self.transcript.append(rsp)
        self.phase = _CAPS_KNOWN
        return rsp

    def _serve_algorithms(self, msg: wire.NegotiateAlgorithms, raw: bytes) -> bytes:
        offered = msg.offered.categories()
        own = self.cfg.algorithm_menu.categories()
        selected = []
        for offered_cat, own_cat in zip(offered, own):
            common = [a for a in offered_cat if a in own_cat]
            if not common:
                return wire.encode_message(
                    wire.ErrorMessage(code=wire.ErrorCode.INVALID_REQUEST,
                                      detail=b"alg-mismatch"), self.version)
            selected.append(common[0])  # highest requester priority
        suite = CryptoSuite(*selected)
        self.transcript.append(raw)
        rsp = wire.encode_message(wire.Algorithms(selected=suite), self.version)
        self.transcript.append(rsp)
        self.transcript.mark(CK_VCA)
        self.suite = suite
        self._rekey_provider(suite)
        self.phase = _ALGS_AGREED
        return rsp

    def _serve_digests(self, msg: wire.GetDigests, raw: bytes) -> bytes:
        return self._identity.serve_digests(raw, self.transcript, self.version)

    def _serve_certificate(self, msg: wire.GetCertificate, raw: bytes) -> bytes:
        return self._identity.serve_certificate(msg, raw, self.transcript,
                                                self.version)

    def _serve_challenge(self, msg: wire.Challenge, raw: bytes) -> bytes:
        mutual = (self.cfg.mutual_auth
                  and bool(self.requester_flags & CAP_MUTUAL_AUTH)
                  and bool(self.cfg.capability_flags & CAP_MUTUAL_AUTH))
        self._identity.mutual_auth = mutual
        try:
            rsp = self._identity.serve_challenge(msg, raw, self.transcript,
                                                 self.version)
        finally:
            self._identity.mutual_auth = False
        if mutual:
            self._encap_auth = _EncapAuthDriver(
                self.provider, self.cfg.trusted_requester_roots,
                self.suite.requester_sig, self.cfg.cert_chunk_size, self.version)
        return rsp

    def _serve_measurements(self, msg: wire.GetMeasurements, raw: bytes) -> bytes:
        total = len(self.cfg.measurements)
        if msg.operand == wire.MeasOperand.COUNT:
            blocks = ()
        elif msg.operand == wire.MeasOperand.ALL:
            blocks = self._measurement_blocks(range(1, total + 1))
        elif 1 <= msg.operand <= total:
            blocks = self._measurement_blocks([msg.operand])
        else:
            return wire.encode_message(
                wire.ErrorMessage(code=wire.ErrorCode.INVALID_REQUEST,
                                  detail=b"index-out-of-range"), self.version)
        self.meas_log.append(raw)
        rsp = wire.Measurements(block_count=total, blocks=blocks,
                                nonce=self.provider.random_bytes(wire.NONCE_LEN),
                                signature=None)
        if msg.signature_requested:
            raw0 = wire.encode_message(replace(rsp, signature=b""), self.version)
            # the optional-signature flag byte is not part of the signed prefix
            prefix = raw0[:rsp.signed_prefix_len()]
            self.meas_log.append(prefix)
            slot = self.cfg.mutual_auth_slot if self.cfg.mutual_auth_slot in self.cfg.slots else min(self.cfg.slots)
            sig = self.provider.sign(self.cfg.slots[slot][1],
                                     self.meas_log.hash_prefix(self.provider),
                                     self.suite.responder_sig)
            full = wire.encode_message(replace(rsp, signature=sig), self.version)
            self.meas_log.append(full[len(prefix):])
            self.meas_log = TranscriptLog()  # reset after a signed exchange
            return full
        full = wire.encode_message(rsp, self.version)
        self.meas_log.append(full)
        return full

    # -- session establishment -----------------------------------------------------

    def _new_session_half(self, req_half: int) -> int:
        while True:
            half = int.from_bytes(self.provider.random_bytes(2), "little")
            sid = req_half | (half << 16)
            if half and sid not in self.sessions:
                return half

    def _serve_key_exchange(self, msg: wire.KeyExchange, raw: bytes) -> bytes:
        if msg.slot not in self.cfg.slots:
            raise InvalidSlot(f"slot {msg.slot} not provisioned")
        if len(self.sessions) >= self.cfg.max_sessions:
            return wire.encode_message(
                wire.ErrorMessage(code=wire.ErrorCode.BUSY,
                                  detail=b"session-table-full"), self.version)
        mutual = self.cfg.mutual_auth and self.requester_leaf_key is not None
        priv, pub = self.provider.generate_dhe_keypair(self.suite.dhe_group)
        shared = self.provider.dhe_shared_secret(priv, msg.dhe_public)
        rsp_half = self._new_session_half(msg.session_half)
        session_id = msg.session_half | (rsp_half << 16)

        self.transcript.append(raw)
        rsp = wire.KeyExchangeRsp(
            responder_random=self.provider.random_bytes(wire.NONCE_LEN),
            dhe_public=pub,
            measurement_summary_digest=self._measurement_summary(),
            mutual_auth_requested=mutual,
            signature=b"", verify_data=b"",
            session_half=rsp_half)
        raw0 = wire.encode_message(rsp, self.version)
        prefix = raw0[:rsp.signed_prefix_len()]
        self.transcript.append(prefix)
        self.transcript.mark(CK_TH1)
        th1 = self.transcript.hash_prefix(self.provider)
        sig = self.provider.sign(self.cfg.slots[msg.slot][1], th1,
                                 self.suite.responder_sig)
        secrets = derive_handshake_secrets(self.provider, shared, th1)
        vd = compute_verify_data(self.provider, secrets, Direction.RESPONDER,
                                 self.transcript, CK_TH1)
        full = wire.encode_message(
            replace(rsp, signature=sig, verify_data=vd), self.version)
        self.transcript.append(full[len(prefix):])
        self.sessions[session_id] = _SessionEntry(
            state=SessionState(session_id, secrets, self.provider),
            kind="dhe", mutual_required=mutual)
        return full

    def _serve_psk_exchange(self, msg: wire.PskExchange, raw: bytes) -> bytes:
        if not self.cfg.capability_flags & CAP_PSK:
            return wire.encode_message(
                wire.ErrorMessage(code=wire.ErrorCode.UNSUPPORTED_REQUEST,
                                  detail=b"psk"), self.version)
        psk = self.cfg.psk_table.get(msg.psk_hint)
        if psk is None:
            return wire.encode_message(
                wire.ErrorMessage(code=wire.ErrorCode.INVALID_REQUEST,
                                  detail=b"psk-hint"), self.version)
        if len(self.sessions) >= self.cfg.max_sessions:
            return wire.encode_message(
                wire.ErrorMessage(code=wire.ErrorCode.BUSY,
                                  detail=b"session-table-full"), self.version)
        rsp_half = self._new_session_half(msg.session_half)
        session_id = msg.session_half | (rsp_half << 16)
        self.transcript.append(raw)
        rsp = wire.PskExchangeRsp(
            responder_context=self.provider.random_bytes(wire.NONCE_LEN),
            verify_data=b"", session_half=rsp_half)
        raw0 = wire.encode_message(rsp, self.version)
        prefix = raw0[:rsp.signed_prefix_len()]
        self.transcript.append(prefix)
        self.transcript.mark(CK_TH1)
        th1 = self.transcript.hash_prefix(self.provider)
        secrets = derive_handshake_secrets(self.provider, psk, th1)
        vd = compute_verify_data(self.provider, secrets, Direction.RESPONDER,
                                 self.transcript, CK_TH1)
        full = wire.encode_message(replace(rsp, verify_data=vd), self.version)
        self.transcript.append(full[len(prefix):])
        self.sessions[session_id] = _SessionEntry(
            state=SessionState(session_id, secrets, self.provider), kind="psk")
        return full

    # -- encapsulated flow (plaintext variant: mutual authentication) ---------------

    def _serve_get_encapsulated(self, msg, raw: bytes) -> bytes:
        driver = self._encap_auth
        if driver is None or driver.done:
            return wire.encode_message(
                wire.ErrorMessage(code=wire.ErrorCode.UNEXPECTED_REQUEST,
                                  detail=b"no-encap-pending"), self.version)
        inner = driver.next_request()
        return wire.encode_message(wire.EncapsulatedRequest(inner=inner),
                                   self.version)

    def _serve_deliver_encapsulated(self, msg, raw: bytes) -> bytes:
        driver = self._encap_auth
        if driver is None:
            return wire.encode_message(
                wire.ErrorMessage(code=wire.ErrorCode.UNEXPECTED_REQUEST,
                                  detail=b"no-encap-pending"), self.version)
        try:
            driver.feed(msg.inner)
        except (SignatureInvalid, MalformedMessage, SpdmError) as exc:
            self._encap_auth = None
            return wire.encode_message(
                wire.ErrorMessage(code=wire.ErrorCode.INVALID_REQUEST,
                                  detail=type(exc).__name__.encode()), self.version)
        if driver.done:
            self.requester_leaf_key = driver.leaf_key
            self._encap_auth = None
            return wire.encode_message(
                wire.EncapsulatedResponseAck(inner=None), self.version)
        return wire.encode_message(
            wire.EncapsulatedResponseAck(inner=driver.next_request()), self.version)

    # -- in-session dispatch ----------------------------------------------------------

    def _handle_secured(self, raw: bytes):
        try:
            rec = wire.decode_secured_record(raw)
        except MalformedMessage:
            return "record", self._error(wire.ErrorCode.INVALID_REQUEST, b"record")
        entry = self.sessions.get(rec.session_id)
        if entry is None:
            return "record", self._error(wire.ErrorCode.INVALID_REQUEST,
                                         b"unknown-session")
        try:
            plaintext = entry.state.open_record(Direction.REQUESTER, rec)
        except ReplayDetected:
            return "record", self._error(wire.ErrorCode.DECRYPT_ERROR, b"replay")
        except SequenceGap:
            return "record", self._error(wire.ErrorCode.DECRYPT_ERROR, b"gap")
        except DecryptError:
            return "record", self._error(wire.ErrorCode.DECRYPT_ERROR, b"decrypt")
        except InvalidPhase:
            return "record", self._error(wire.ErrorCode.UNEXPECTED_REQUEST,
                                         b"terminated")

        def sealed(inner_msg=None, inner_raw=None, establish=False, terminate=False,
                   after=None):
            body = inner_raw if inner_raw is not None else wire.encode_message(
                inner_msg, self.version)
            rec_out = entry.state.seal_record(Direction.RESPONDER, body)
            if establish:
                entry.state.establish()
            if terminate:
                entry.state.terminate()
                del self.sessions[entry.state.session_id]
            if after is not None:
                after()
            return wire.frame_secured(wire.encode_secured_record(rec_out))

        try:
            msg = wire.decode_message(plaintext)
        except SpdmError:
            return "record", sealed(wire.ErrorMessage(
                code=wire.ErrorCode.INVALID_REQUEST, detail=b"inner"))
        label = wire.Code(msg.CODE).name

        if entry.state.phase is SessionPhase.HANDSHAKING:
            if isinstance(msg, wire.Finish) and entry.kind == "dhe":
                return label, self._serve_finish(entry, msg, plaintext, sealed)
            if isinstance(msg, wire.PskFinish) and entry.kind == "psk":
                return label, self._serve_psk_finish(entry, msg, plaintext, sealed)
            return label, sealed(wire.ErrorMessage(
                code=wire.ErrorCode.UNEXPECTED_REQUEST, detail=b"handshaking"))

        if isinstance(msg, wire.Heartbeat):
            return label, sealed(wire.HeartbeatAck())
        if isinstance(msg, wire.KeyUpdate):
            return label, self._serve_key_update(entry, msg, sealed)
        if isinstance(msg, wire.EndSession):
            return label, sealed(wire.EndSessionAck(), terminate=True)
        if isinstance(msg, wire.AppData):
            return label, self._serve_app_data(entry, msg, sealed)
        if isinstance(msg, wire.GetEncapsulatedRequest):
            op = self._encap_updates.get(entry.state.session_id)
            if op is None:
                return label, sealed(wire.ErrorMessage(
                    code=wire.ErrorCode.UNEXPECTED_REQUEST, detail=b"no-encap"))
            inner = wire.encode_message(wire.KeyUpdate(op=op), self.version)
            return label, sealed(wire.EncapsulatedRequest(inner=inner))
        if isinstance(msg, wire.DeliverEncapsulatedResponse):
            return label, self._serve_session_deliver(entry, msg, sealed)
        return label, sealed(wire.ErrorMessage(
            code=wire.ErrorCode.UNEXPECTED_REQUEST, detail=b"in-session"))

    def _serve_finish(self, entry, msg: wire.Finish, raw: bytes, sealed) -> bytes:
        if entry.mutual_required:
            if msg.requester_signature is None:
                return sealed(wire.ErrorMessage(
                    code=wire.ErrorCode.DECRYPT_ERROR, detail=b"missing-mutual-sig"))
            pre_finish = self.transcript.hash_prefix(self.provider)
            if not self.provider.verify(self.requester_leaf_key, pre_finish,
                                        msg.requester_signature,
                                        self.suite.requester_sig):
                return sealed(wire.ErrorMessage(
                    code=wire.ErrorCode.DECRYPT_ERROR, detail=b"finish-sig"))
        prefix_len = msg.verify_prefix_len()
        self.transcript.append(raw[:prefix_len])
        expected = self.provider.hmac(
            entry.state.secrets.handshake[Direction.REQUESTER].finished_key,
            self.transcript.hash_prefix(self.provider))
        if expected != msg.verify_data:
            return sealed(wire.ErrorMessage(
                code=wire.ErrorCode.DECRYPT_ERROR, detail=b"verify-data"))
        self.transcript.append(raw[prefix_len:])

        rsp0 = wire.FinishRsp(verify_data=b"")
        raw0 = wire.encode_message(rsp0, self.version)
        prefix = raw0[:rsp0.verify_prefix_len()]
        self.transcript.append(prefix)
        vd = self.provider.hmac(
            entry.state.secrets.handshake[Direction.RESPONDER].finished_key,
            self.transcript.hash_prefix(self.provider))
        full = wire.encode_message(wire.FinishRsp(verify_data=vd), self.version)
        self.transcript.append(full[len(prefix):])
        self.transcript.mark(CK_TH2)
        th2 = self.transcript.hash_prefix(self.provider)
        derive_data_secrets(self.provider, entry.state.secrets, th2)
        return sealed(inner_raw=full, establish=True)

    def _serve_psk_finish(self, entry, msg: wire.PskFinish, raw: bytes, sealed) -> bytes:
        prefix_len = msg.verify_prefix_len()
        self.transcript.append(raw[:prefix_len])
        expected = self.provider.hmac(
            entry.state.secrets.handshake[Direction.REQUESTER].finished_key,
            self.transcript.hash_prefix(self.provider))
        if expected != msg.verify_data:
            return sealed(wire.ErrorMessage(
                code=wire.ErrorCode.DECRYPT_ERROR, detail=b"verify-data"))
        self.transcript.append(raw[prefix_len:])
        full = wire.encode_message(wire.PskFinishRsp(), self.version)
        self.transcript.append(full)
        self.transcript.mark(CK_TH2)
        th2 = self.transcript.hash_prefix(self.provider)
        derive_data_secrets(self.provider, entry.state.secrets, th2)
        return sealed(inner_raw=full, establish=True)

    def _serve_key_update(self, entry, msg: wire.KeyUpdate, sealed) -> bytes:
        if msg.op == wire.KeyUpdateOp.VERIFY_NEW_KEY:
            return sealed(wire.KeyUpdateAck())
        # requester initiated: UPDATE_KEY refreshes the requester direction
        def apply():
            entry.state.update_keys(msg.op, Direction.REQUESTER)
        return sealed(wire.KeyUpdateAck(), after=apply)

    def _serve_session_deliver(self, entry, msg, sealed) -> bytes:
        sid = entry.state.session_id
        op = self._encap_updates.get(sid)
        if op is None:
            return sealed(wire.ErrorMessage(
                code=wire.ErrorCode.UNEXPECTED_REQUEST, detail=b"no-encap"))
        try:
            inner = wire.decode_message(msg.inner)
        except SpdmError:
            return sealed(wire.ErrorMessage(
                code=wire.ErrorCode.INVALID_REQUEST, detail=b"inner"))
        if not isinstance(inner, wire.KeyUpdateAck):
            return sealed(wire.ErrorMessage(
                code=wire.ErrorCode.INVALID_REQUEST, detail=b"expected-ack"))
        del self._encap_updates[sid]

        def apply():
            # responder initiated: UPDATE_KEY refreshes the responder direction
            entry.state.update_keys(op, Direction.RESPONDER)
        return sealed(wire.EncapsulatedResponseAck(inner=None), after=apply)

    def _serve_app_data(self, entry, msg: wire.AppData, sealed) -> bytes:
        if not msg.payload:
            return sealed(wire.ErrorMessage(
                code=wire.ErrorCode.INVALID_REQUEST, detail=b"empty-app"))
        handler = self.app_handlers.get(msg.payload[0])
        if handler is None:
            return sealed(wire.ErrorMessage(
                code=wire.ErrorCode.UNSUPPORTED_REQUEST, detail=b"opcode"))
        result = handler(msg.payload[1:])
        return sealed(wire.AppData(payload=msg.payload[:1] + result))

    # -- plain app baseline ------------------------------------------------------------

    def _handle_app_plain(self, payload: bytes):
        if not payload:
            return "app-plain", self._error(wire.ErrorCode.INVALID_REQUEST,
                                            b"empty-app")
        handler = self.app_handlers.get(payload[0])
        if handler is None:
            return "app-plain", self._error(wire.ErrorCode.UNSUPPORTED_REQUEST,
                                            b"opcode")
        result = handler(payload[1:])
        return "app-plain", wire.frame_app_plain(payload[:1] + result)
