"""Client-side state machine driving the full protocol flow.

One Requester per connection. Methods follow the flow order: the three
negotiation exchanges, digest/certificate retrieval, challenge
authentication (serving encapsulated mutual-auth requests when asked),
measurement retrieval, session establishment (certificate or PSK), and
the in-session operations. Raw message bytes are appended to the
transcript exactly as they crossed the wire; messages carrying a
signature or verify_data are appended in two slices around the covered
prefix so both endpoints hash identical logs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

from . import crypto, wire
from .crypto import CertificateChain, CryptoProvider
from .errors import (
    AlgorithmMismatch,
    DecryptError,
    DigestMismatch,
    InvalidPhase,
    KeyAlgorithmMismatch,
    MalformedMessage,
    NonceMismatch,
    ResponderError,
    SignatureInvalid,
    UnknownPskHint,
    VerifyDataMismatch,
    VerifyNewKeyFailed,
    VersionMismatch,
)
from .responder import CAP_MUTUAL_AUTH, DEFAULT_CAPS, IdentityServer
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

# Requester phases, strictly ordered.
RESET, VERSION_AGREED, CAPS_KNOWN, ALGS_AGREED, AUTHENTICATED = range(5)

_PHASE_NAMES = {RESET: "Reset", VERSION_AGREED: "VersionAgreed",
                CAPS_KNOWN: "CapsKnown", ALGS_AGREED: "AlgsAgreed",
                AUTHENTICATED: "Authenticated"}

MODE_ALL_AT_ONCE = "all-at-once"
MODE_ONE_BY_ONE = "one-by-one"

SESSION_CERT_DHE = "cert-dhe"
SESSION_PSK = "psk"


@dataclass
class RequesterConfig:
    supported_versions: tuple[int, ...] = (wire.PROTOCOL_V10, wire.PROTOCOL_V11)
    capability_flags: int = DEFAULT_CAPS
    algorithm_menu: crypto.AlgorithmMenu = crypto.DEFAULT_MENU
    trusted_responder_roots: tuple = ()  # DER root certificates
    own_chain: CertificateChain | None = None  # for mutual authentication
    own_key: object = None
    psk_table: dict = field(default_factory=dict)
    cert_chunk_size: int = 1024
    measurement_selector: int = 1  # summary selector sent in Challenge
    busy_retry_limit: int = 3
    busy_backoff: object = None  # callable(attempt) hook
    rng_seed: int | None = None
    heartbeat_period: float | None = None  # configuration only; no default


class Requester:
    def __init__(self, cfg: RequesterConfig, endpoint):
        self.cfg = cfg
        self.endpoint = endpoint
        self.provider = CryptoProvider(crypto.DEFAULT_SUITE, seed=cfg.rng_seed)
        self.phase = RESET
        self.version = wire.PROTOCOL_V11
        self.suite: crypto.CryptoSuite | None = None
        self.peer_flags = 0
        self.peer_ct_exponent = 0
        self.transcript = TranscriptLog()
        self.meas_log = TranscriptLog()
        self.digest_mask = 0
        self.digests: dict[int, bytes] = {}
        self.chains: dict[int, CertificateChain] = {}
        self.responder_leaf: dict[int, object] = {}
        self.authenticated_slot: int | None = None
        self.sessions: dict[int, SessionState] = {}
        self.last_timings: dict[str, float] = {}
        self._chain_cache: dict[bytes, CertificateChain] = {}
        self._seen_nonces: set[bytes] = set()

    # -- plumbing ---------------------------------------------------------------

    def _require_phase(self, minimum: int, op: str) -> None:
        if self.phase < minimum:
            raise InvalidPhase(
                f"{op} requires phase {_PHASE_NAMES[minimum]}, "
                f"currently {_PHASE_NAMES[self.phase]}")

    def _send_frame_recv(self, frame: bytes) -> tuple[int, bytes]:
        attempts = 0
        while True:
            self.endpoint.send_msg(frame)
            kind, payload = wire.parse_frame(self.endpoint.recv_msg())
            if kind == wire.FRAME_PLAIN:
                try:
                    msg = wire.decode_message(payload)
                except (MalformedMessage, VersionMismatch):
                    raise
                if isinstance(msg, wire.ErrorMessage):
                    if (msg.code == wire.ErrorCode.BUSY
                            and attempts < self.cfg.busy_retry_limit):
                        attempts += 1
                        if self.cfg.busy_backoff is not None:
                            self.cfg.busy_backoff(attempts)
                        continue
                    self._raise_for_error(msg)
            return kind, payload

    def _raise_for_error(self, msg: wire.ErrorMessage):
        if msg.code == wire.ErrorCode.DECRYPT_ERROR:
            raise DecryptError(msg.detail.decode("latin1"))
        if msg.code == wire.ErrorCode.VERSION_MISMATCH:
            raise VersionMismatch("responder rejected version")
        if msg.code == wire.ErrorCode.INVALID_REQUEST and msg.detail == b"alg-mismatch":
            raise AlgorithmMismatch("responder found no common algorithm")
        if msg.code == wire.ErrorCode.INVALID_REQUEST and msg.detail == b"psk-hint":
            raise UnknownPskHint("responder does not know the PSK hint")
        raise ResponderError(int(msg.code), msg.detail)

    def _exchange(self, msg, expect: type, pinned_version: int | None = None):
        """Plaintext request/response; returns (decoded, raw response)."""
        version = pinned_version if pinned_version is not None else self.version
        raw_req = wire.encode_message(msg, version)
        kind, payload = self._send_frame_recv(wire.frame_plain(raw_req))
        if kind != wire.FRAME_PLAIN:
            raise MalformedMessage("expected a plaintext response")
        rsp = wire.decode_message(payload)
        if not isinstance(rsp, expect):
            raise MalformedMessage(
                f"expected {expect.__name__}, got {type(rsp).__name__}")
        return rsp, raw_req, payload

    def _exchange_secured(self, session: SessionState, msg, expect: type):
        """Sealed request/response within a session."""
        raw = wire.encode_message(msg, self.version)
        rec = session.seal_record(Direction.REQUESTER, raw)
        frame = wire.frame_secured(wire.encode_secured_record(rec))
        kind, payload = self._send_frame_recv(frame)
        if kind != wire.FRAME_SECURED:
            raise MalformedMessage("expected a secured response")
        rec_in = wire.decode_secured_record(payload)
        plaintext = session.open_record(Direction.RESPONDER, rec_in)
        rsp = wire.decode_message(plaintext)
        if isinstance(rsp, wire.ErrorMessage):
            self._raise_for_error(rsp)
        if not isinstance(rsp, expect):
            raise MalformedMessage(
                f"expected {expect.__name__}, got {type(rsp).__name__}")
        return rsp, plaintext

    def _check_nonce(self, nonce: bytes) -> None:
        if nonce in self._seen_nonces:
            raise NonceMismatch("responder reused a nonce")
        self._seen_nonces.add(nonce)

    # -- connection bootstrap ------------------------------------------------------

    def negotiate_version(self) -> int:
        self._require_phase(RESET, "negotiate_version")
        if self.phase != RESET:
            raise InvalidPhase("negotiate_version requires phase Reset")
        rsp, raw_req, raw_rsp = self._exchange(
            wire.GetVersion(), wire.Version, pinned_version=wire.PROTOCOL_V11)
        common = set(self.cfg.supported_versions) & set(rsp.version_list)
        if not common:
            raise VersionMismatch(
                f"no common version: offered {rsp.version_list}")
        self.version = max(common)
        self.transcript.append(raw_req)
        self.transcript.append(raw_rsp)
        self.phase = VERSION_AGREED
        return self.version

    def negotiate_capabilities(self) -> int:
        self._require_phase(VERSION_AGREED, "negotiate_capabilities")
        rsp, raw_req, raw_rsp = self._exchange(
            wire.GetCapabilities(flags=self.cfg.capability_flags),
            wire.Capabilities)
        self.peer_flags = rsp.flags
        self.peer_ct_exponent = rsp.ct_exponent
        self.transcript.append(raw_req)
        self.transcript.append(raw_rsp)
        self.phase = CAPS_KNOWN
        return rsp.flags

    def negotiate_algorithms(self) -> crypto.CryptoSuite:
        self._require_phase(CAPS_KNOWN, "negotiate_algorithms")
        menu = self.cfg.algorithm_menu
        rsp, raw_req, raw_rsp = self._exchange(
            wire.NegotiateAlgorithms(offered=menu), wire.Algorithms)
        for chosen, offered in zip(rsp.selected.as_tuple(), menu.categories()):
            if chosen not in offered:
                raise AlgorithmMismatch(
                    f"responder selected unoffered algorithm {chosen:#x}")
        self.suite = rsp.selected
        self.provider = self.provider.with_suite(self.suite)
        self.transcript.append(raw_req)
        self.transcript.append(raw_rsp)
        self.transcript.mark(CK_VCA)
        self.phase = ALGS_AGREED
        return self.suite

    def init_connection(self) -> crypto.CryptoSuite:
        """GET_VERSION / GET_CAPABILITIES / NEGOTIATE_ALGORITHMS."""
        self.negotiate_version()
        self.negotiate_capabilities()
        return self.negotiate_algorithms()

    # -- authentication --------------------------------------------------------------

    def fetch_digests(self):
        self._require_phase(ALGS_AGREED, "fetch_digests")
        rsp, raw_req, raw_rsp = self._exchange(wire.GetDigests(), wire.Digests)
        self.transcript.append(raw_req)
        self.transcript.append(raw_rsp)
        self.digest_mask = rsp.slot_mask
        slots = [i for i in range(8) if rsp.slot_mask & (1 << i)]
        if len(slots) != len(rsp.digest_list):
            raise MalformedMessage("digest count does not match slot mask")
        self.digests = dict(zip(slots, rsp.digest_list))
        for slot, digest in self.digests.items():
            cached = self._chain_cache.get(digest)
            if cached is not None:
                self.chains[slot] = replace(cached, slot=slot)
        return rsp.slot_mask, rsp.digest_list

    def fetch_certificate(self, slot: int) -> CertificateChain:
        self._require_phase(ALGS_AGREED, "fetch_certificate")
        if not self.digest_mask & (1 << slot):
            raise InvalidPhase(f"slot {slot} not present in digest mask")
        expected_digest = self.digests[slot]
        cached = self._chain_cache.get(expected_digest)
        if cached is not None:
            chain = replace(cached, slot=slot)
            self.chains[slot] = chain
            self.responder_leaf[slot] = crypto.verify_certificate_chain(
                chain, chain.root())
            return chain
        chunk = self.cfg.cert_chunk_size
        portions = bytearray()
        offset = 0
        while True:
            rsp, raw_req, raw_rsp = self._exchange(
                wire.GetCertificate(slot=slot, offset=offset, req_length=chunk),
                wire.Certificate)
            self.transcript.append(raw_req)
            self.transcript.append(raw_rsp)
            portions += rsp.portion
            offset += len(rsp.portion)
            if rsp.remainder_length == 0:
                break
            if not rsp.portion:
                raise MalformedMessage("empty portion with nonzero remainder")
        blob = bytes(portions)
        if self.provider.hash(blob) != expected_digest:
            raise DigestMismatch("chain bytes do not match advertised digest")
        chain = CertificateChain.from_serialized(slot, blob)
        leaf = None
        for root in self.cfg.trusted_responder_roots:
            if chain.root() == root:
                leaf = crypto.verify_certificate_chain(chain, root)
                break
        if leaf is None:
            raise crypto.UntrustedRoot("no trusted root matches the chain")
        self._check_leaf_algorithm(leaf)
        self.chains[slot] = chain
        self.responder_leaf[slot] = leaf
        self._chain_cache[expected_digest] = chain
        return chain

    def _check_leaf_algorithm(self, leaf) -> None:
        from cryptography.hazmat.primitives.asymmetric import ec, rsa
        algo = self.suite.responder_sig
        if algo == crypto.SIG_ECDSA_P384 and not isinstance(
                leaf, ec.EllipticCurvePublicKey):
            raise KeyAlgorithmMismatch("leaf key is not an EC key")
        if algo == crypto.SIG_RSA_PSS_3072 and not isinstance(leaf, rsa.RSAPublicKey):
            raise KeyAlgorithmMismatch("leaf key is not an RSA key")

    def challenge_authenticate(self, slot: int):
        """Challenge the responder; on success phase is Authenticated."""
        self._require_phase(ALGS_AGREED, "challenge_authenticate")
        leaf = self.responder_leaf.get(slot)
        if leaf is None:
            raise InvalidPhase(f"chain for slot {slot} not fetched and verified")
        nonce = self.provider.random_bytes(wire.NONCE_LEN)
        msg = wire.Challenge(nonce=nonce,
                             summary_selector=self.cfg.measurement_selector,
                             slot=slot)
        rsp, raw_req, raw_rsp = self._exchange(msg, wire.ChallengeAuth)
        if rsp.cert_chain_digest != self.digests[slot]:
            raise DigestMismatch("challenge bound to a different chain")
        self._check_nonce(rsp.nonce)
        self.transcript.append(raw_req)
        prefix_len = rsp.signed_prefix_len()
        self.transcript.append(raw_rsp[:prefix_len])
        digest = self.transcript.hash_prefix(self.provider)
        if not self.provider.verify(leaf, digest, rsp.signature,
                                    self.suite.responder_sig):
            raise SignatureInvalid("challenge signature invalid")
        self.transcript.append(raw_rsp[prefix_len:])
        self.phase = AUTHENTICATED
        self.authenticated_slot = slot
        if rsp.mutual_auth_requested:
            self.handle_encapsulated_flow()
        return leaf

    # -- measurements -------------------------------------------------------------------

    def _one_measurement_exchange(self, operand: int, want_sig: bool):
        nonce = self.provider.random_bytes(wire.NONCE_LEN)
        msg = wire.GetMeasurements(operand=operand, nonce=nonce,
                                   signature_requested=want_sig)
        rsp, raw_req, raw_rsp = self._exchange(msg, wire.Measurements)
        self._check_nonce(rsp.nonce)
        self.meas_log.append(raw_req)
        if want_sig:
            if rsp.signature is None:
                raise SignatureInvalid("signature requested but absent")
            prefix_len = rsp.signed_prefix_len()
            self.meas_log.append(raw_rsp[:prefix_len])
            digest = self.meas_log.hash_prefix(self.provider)
            slot = self.authenticated_slot if self.authenticated_slot is not None else 0
            leaf = self.responder_leaf.get(slot)
            if leaf is None or not self.provider.verify(
                    leaf, digest, rsp.signature, self.suite.responder_sig):
                raise SignatureInvalid("measurement signature invalid")
            self.meas_log.append(raw_rsp[prefix_len:])
            self.meas_log = TranscriptLog()  # reset after the signed exchange
        else:
            self.meas_log.append(raw_rsp)
        for block in rsp.blocks:
            if self.provider.hash(block.payload) != block.digest:
                raise DigestMismatch(f"measurement block {block.index} digest")
        return rsp

    def fetch_measurements(self, mode: str = MODE_ALL_AT_ONCE):
        """Returns (blocks, signature_verified)."""
        self._require_phase(ALGS_AGREED, "fetch_measurements")
        if mode == MODE_ALL_AT_ONCE:
            rsp = self._one_measurement_exchange(wire.MeasOperand.ALL, True)
            return list(rsp.blocks), True
        if mode != MODE_ONE_BY_ONE:
            raise ValueError(f"unknown measurement mode {mode!r}")
        count_rsp = self._one_measurement_exchange(wire.MeasOperand.COUNT, False)
        blocks = []
        for index in range(1, count_rsp.block_count + 1):
            rsp = self._one_measurement_exchange(
                index, index == count_rsp.block_count)
            blocks.extend(rsp.blocks)
        return blocks, True

    def measurement_count(self) -> int:
        self._require_phase(ALGS_AGREED, "measurement_count")
        rsp = self._one_measurement_exchange(wire.MeasOperand.COUNT, False)
        return rsp.block_count

    # -- session establishment --------------------------------------------------------------

    def _new_session_half(self) -> int:
        while True:
            half = int.from_bytes(self.provider.random_bytes(2), "little")
            if half and all((sid & 0xFFFF) != half for sid in self.sessions):
                return half

    def establish_session(self, mode: str = SESSION_CERT_DHE,
                          psk_hint: bytes | None = None) -> int:
        if mode == SESSION_CERT_DHE:
            return self._establish_dhe()
        if mode == SESSION_PSK:
            return self._establish_psk(psk_hint)
        raise ValueError(f"unknown session mode {mode!r}")

    def _establish_dhe(self) -> int:
        self._require_phase(AUTHENTICATED, "establish_session(cert-dhe)")
        slot = self.authenticated_slot
        leaf = self.responder_leaf[slot]
        req_half = self._new_session_half()
        t0 = time.perf_counter()
        priv, pub = self.provider.generate_dhe_keypair(self.suite.dhe_group)
        msg = wire.KeyExchange(
            requester_random=self.provider.random_bytes(wire.NONCE_LEN),
            dhe_public=pub, slot=slot, session_half=req_half)
        rsp, raw_req, raw_rsp = self._exchange(msg, wire.KeyExchangeRsp)
        self.transcript.append(raw_req)
        prefix_len = rsp.signed_prefix_len()
        self.transcript.append(raw_rsp[:prefix_len])
        self.transcript.mark(CK_TH1)
        th1 = self.transcript.hash_prefix(self.provider)
        if not self.provider.verify(leaf, th1, rsp.signature,
                                    self.suite.responder_sig):
            raise SignatureInvalid("key-exchange signature invalid")
        shared = self.provider.dhe_shared_secret(priv, rsp.dhe_public)
        secrets = derive_handshake_secrets(self.provider, shared, th1)
        expected_vd = compute_verify_data(self.provider, secrets,
                                          Direction.RESPONDER, self.transcript,
                                          CK_TH1)
        if expected_vd != rsp.verify_data:
            raise VerifyDataMismatch("key-exchange verify_data mismatch")
        self.transcript.append(raw_rsp[prefix_len:])
        self.last_timings["key_exchange"] = time.perf_counter() - t0

        session_id = (rsp.session_half << 16) | msg.session_half
        session = SessionState(session_id, secrets, self.provider)
        t0 = time.perf_counter()
        self._finish_handshake(session, rsp.mutual_auth_requested)
        self.last_timings["finish"] = time.perf_counter() - t0
        self.sessions[session_id] = session
        return session_id

    def _finish_handshake(self, session: SessionState, mutual: bool) -> None:
        sig = None
        if mutual:
            if self.cfg.own_key is None:
                raise SignatureInvalid("mutual auth requires an own key")
            pre_finish = self.transcript.hash_prefix(self.provider)
            sig = self.provider.sign(self.cfg.own_key, pre_finish,
                                     self.suite.requester_sig)
        msg0 = wire.Finish(requester_signature=sig, verify_data=b"")
        raw0 = wire.encode_message(msg0, self.version)
        prefix = raw0[:msg0.verify_prefix_len()]
        self.transcript.append(prefix)
        vd = self.provider.hmac(
            session.secrets.handshake[Direction.REQUESTER].finished_key,
            self.transcript.hash_prefix(self.provider))
        full_msg = wire.Finish(requester_signature=sig, verify_data=vd)
        raw = wire.encode_message(full_msg, self.version)
        self.transcript.append(raw[len(prefix):])

        rsp, raw_rsp = self._exchange_secured(session, full_msg, wire.FinishRsp)
        prefix_len = rsp.verify_prefix_len()
        self.transcript.append(raw_rsp[:prefix_len])
        expected = self.provider.hmac(
            session.secrets.handshake[Direction.RESPONDER].finished_key,
            self.transcript.hash_prefix(self.provider))
        if expected != rsp.verify_data:
            raise VerifyDataMismatch("finish verify_data mismatch")
        self.transcript.append(raw_rsp[prefix_len:])
        self.transcript.mark(CK_TH2)
        th2 = self.transcript.hash_prefix(self.provider)
        derive_data_secrets(self.provider, session.secrets, th2)
        session.establish()

    def _establish_psk(self, hint: bytes | None) -> int:
        self._require_phase(ALGS_AGREED, "establish_session(psk)")
        if hint is None or hint not in self.cfg.psk_table:
            raise UnknownPskHint(f"hint {hint!r} not in local psk table")
        psk = self.cfg.psk_table[hint]
        req_half = self._new_session_half()
        t0 = time.perf_counter()
        msg = wire.PskExchange(
            psk_hint=hint,
            requester_context=self.provider.random_bytes(wire.NONCE_LEN),
            session_half=req_half)
        rsp, raw_req, raw_rsp = self._exchange(msg, wire.PskExchangeRsp)
        self.transcript.append(raw_req)
        prefix_len = rsp.signed_prefix_len()
        self.transcript.append(raw_rsp[:prefix_len])
        self.transcript.mark(CK_TH1)
        th1 = self.transcript.hash_prefix(self.provider)
        secrets = derive_handshake_secrets(self.provider, psk, th1)
        expected_vd = compute_verify_data(self.provider, secrets,
                                          Direction.RESPONDER, self.transcript,
                                          CK_TH1)
        if expected_vd != rsp.verify_data:
            raise VerifyDataMismatch("psk-exchange verify_data mismatch")
        self.transcript.append(raw_rsp[prefix_len:])
        self.last_timings["psk_exchange"] = time.perf_counter() - t0

        session_id = (rsp.session_half << 16) | msg.session_half
        session = SessionState(session_id, secrets, self.provider)
        t0 = time.perf_counter()
        msg0 = wire.PskFinish(verify_data=b"")
        raw0 = wire.encode_message(msg0, self.version)
        prefix = raw0[:msg0.verify_prefix_len()]
        self.transcript.append(prefix)
        vd = self.provider.hmac(
            session.secrets.handshake[Direction.REQUESTER].finished_key,
            self.transcript.hash_prefix(self.provider))
        full_msg = wire.PskFinish(verify_data=vd)
        raw = wire.encode_message(full_msg, self.version)
        self.transcript.append(raw[len(prefix):])
        rsp2, raw_rsp2 = self._exchange_secured(session, full_msg, wire.PskFinishRsp)
        self.transcript.append(raw_rsp2)
        self.transcript.mark(CK_TH2)
        th2 = self.transcript.hash_prefix(self.provider)
        derive_data_secrets(self.provider, session.secrets, th2)
        session.establish()
        self.last_timings["psk_finish"] = time.perf_counter() - t0
        self.sessions[session_id] = session
        return session_id

    # -- in-session operations ----------------------------------------------------------------

    def _session(self, session_id: int) -> SessionState:
        session = self.sessions.get(session_id)
        if session is None:
            raise InvalidPhase(f"no session {session_id:#x}")
        if session.phase is not SessionPhase.ESTABLISHED:
            raise InvalidPhase(f"session {session_id:#x} is {session.phase.value}")
        return session

    def heartbeat(self, session_id: int) -> None:
        session = self._session(session_id)
        self._exchange_secured(session, wire.Heartbeat(), wire.HeartbeatAck)

    def request_key_update(self, session_id: int,
                           op: int = wire.KeyUpdateOp.UPDATE_KEY) -> None:
        """KEY_UPDATE under the old keys, switch, then VerifyNewKey."""
        session = self._session(session_id)
        self._exchange_secured(session, wire.KeyUpdate(op=op), wire.KeyUpdateAck)
        session.update_keys(op, Direction.REQUESTER)
        try:
            self._exchange_secured(
                session, wire.KeyUpdate(op=wire.KeyUpdateOp.VERIFY_NEW_KEY),
                wire.KeyUpdateAck)
        except (DecryptError, ResponderError) as exc:
            raise VerifyNewKeyFailed(str(exc)) from None

    def end_session(self, session_id: int) -> None:
        """Idempotent: ending a terminated session is a no-op."""
        session = self.sessions.get(session_id)
        if session is None:
            raise InvalidPhase(f"no session {session_id:#x}")
        if session.phase is SessionPhase.TERMINATED:
            return
        self._exchange_secured(session, wire.EndSession(), wire.EndSessionAck)
        session.terminate()

    def send_app_request(self, session_id: int, payload: bytes) -> bytes:
        session = self._session(session_id)
        rsp, _ = self._exchange_secured(session, wire.AppData(payload=payload),
                                        wire.AppData)
        return rsp.payload

    def send_plain_app(self, payload: bytes) -> bytes:
        """Baseline path: application traffic without any protocol involvement."""
        kind, body = self._send_frame_recv(wire.frame_app_plain(payload))
        if kind != wire.FRAME_APP_PLAIN:
            raise MalformedMessage("expected a plain app response")
        return body

    # -- encapsulated flow (requester answers responder-initiated requests) ---------------

    def handle_encapsulated_flow(self, session_id: int | None = None) -> None:
        """Serve encapsulated requests until the final ack.

        Plaintext during challenge-phase mutual authentication; sealed
        in-session when the responder initiates session operations.
        """
        session = self._session(session_id) if session_id is not None else None
        encap_log = TranscriptLog()
        identity = None
        if self.cfg.own_chain is not None:
            identity = IdentityServer(
                self.provider, {self.cfg.own_chain.slot: (self.cfg.own_chain,
                                                          self.cfg.own_key)},
                self.suite.requester_sig if self.suite else
                crypto.DEFAULT_SUITE.requester_sig)
        pending_update = None

        def roundtrip(msg, expect):
            if session is not None:
                return self._exchange_secured(session, msg, expect)[0]
            rsp, _, _ = self._exchange(msg, expect)
            return rsp

        rsp = roundtrip(wire.GetEncapsulatedRequest(), wire.EncapsulatedRequest)
        inner_raw = rsp.inner
        while inner_raw is not None:
            inner = wire.decode_message(inner_raw)
            if isinstance(inner, wire.GetDigests):
                if identity is None:
                    raise SignatureInvalid("no own chain for mutual auth")
                answer = identity.serve_digests(inner_raw, encap_log, self.version)
            elif isinstance(inner, wire.GetCertificate):
                answer = identity.serve_certificate(inner, inner_raw, encap_log,
                                                    self.version)
            elif isinstance(inner, wire.Challenge):
                answer = identity.serve_challenge(inner, inner_raw, encap_log,
                                                  self.version)
            elif isinstance(inner, wire.KeyUpdate) and session is not None:
                pending_update = inner.op
                answer = wire.encode_message(wire.KeyUpdateAck(), self.version)
            else:
                raise MalformedMessage(
                    f"unexpected encapsulated request {type(inner).__name__}")
            ack = roundtrip(wire.DeliverEncapsulatedResponse(inner=answer),
                            wire.EncapsulatedResponseAck)
            inner_raw = ack.inner
        if pending_update is not None and session is not None:
            session.update_keys(pending_update, Direction.RESPONDER)


# -- convenience: full bootstrap with per-step timing -------------------------------


def bootstrap(requester: Requester, slot: int = 0,
              session_mode: str = SESSION_CERT_DHE,
              psk_hint: bytes | None = None) -> dict[str, float]:
    """Runs the full flow from GET_VERSION to an established session,
    returning per-step wall-clock durations in seconds."""
    steps: dict[str, float] = {}

    def timed(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        steps[name] = time.perf_counter() - t0
        return out

    timed("get_version", requester.negotiate_version)
    timed("get_capabilities", requester.negotiate_capabilities)
    timed("negotiate_algorithms", requester.negotiate_algorithms)
    if session_mode == SESSION_PSK:
        sid = timed("establish_session", requester.establish_session,
                    SESSION_PSK, psk_hint)
    else:
        timed("get_digests", requester.fetch_digests)
        timed("get_certificate", requester.fetch_certificate, slot)
        timed("challenge", requester.challenge_authenticate, slot)
        sid = timed("establish_session", requester.establish_session)
    steps["session_id"] = sid
    return steps
