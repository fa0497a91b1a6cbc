"""Seeded random message generators shared by codec tests and the
acceptance suite. One generator per wire variant; gen_message draws a
variant uniformly."""

from __future__ import annotations

import random

from spdmbench import crypto, wire


def _rb(rng: random.Random, lo: int, hi: int) -> bytes:
    return rng.randbytes(rng.randint(lo, hi))


def _nonce(rng: random.Random) -> bytes:
    return rng.randbytes(wire.NONCE_LEN)


def _menu(rng: random.Random) -> crypto.AlgorithmMenu:
    cats = [tuple(rng.randrange(256) for _ in range(rng.randint(0, 4)))
            for _ in range(6)]
    return crypto.AlgorithmMenu(*cats)


def _suite(rng: random.Random) -> crypto.CryptoSuite:
    return crypto.CryptoSuite(*(rng.randrange(256) for _ in range(6)))


def _block(rng: random.Random) -> wire.MeasurementBlock:
    return wire.MeasurementBlock(
        index=rng.randint(1, 254), block_type=rng.randrange(256),
        payload=_rb(rng, 0, 64), digest=_rb(rng, 0, 64))


_VARIANTS = [
    lambda r: wire.GetVersion(),
    lambda r: wire.Version(version_list=tuple(
        r.randrange(256) for _ in range(r.randint(0, 6)))),
    lambda r: wire.GetCapabilities(flags=r.randrange(1 << 32)),
    lambda r: wire.Capabilities(flags=r.randrange(1 << 32),
                                ct_exponent=r.randrange(256)),
    lambda r: wire.NegotiateAlgorithms(offered=_menu(r)),
    lambda r: wire.Algorithms(selected=_suite(r)),
    lambda r: wire.GetDigests(),
    lambda r: wire.Digests(slot_mask=r.randrange(256), digest_list=tuple(
        _rb(r, 0, 48) for _ in range(r.randint(0, 4)))),
    lambda r: wire.GetCertificate(slot=r.randrange(8),
                                  offset=r.randrange(1 << 32),
                                  req_length=r.randrange(1 << 32)),
    lambda r: wire.Certificate(slot=r.randrange(8), portion=_rb(r, 0, 256),
                               remainder_length=r.randrange(1 << 32)),
    lambda r: wire.Challenge(nonce=_nonce(r), summary_selector=r.randrange(256),
                             slot=r.randrange(256)),
    lambda r: wire.ChallengeAuth(
        cert_chain_digest=_rb(r, 0, 48), nonce=_nonce(r),
        measurement_summary_digest=_rb(r, 0, 48), opaque=_rb(r, 0, 32),
        signature=_rb(r, 0, 96), mutual_auth_requested=r.random() < 0.5),
    lambda r: wire.GetMeasurements(operand=r.randrange(256), nonce=_nonce(r),
                                   signature_requested=r.random() < 0.5),
    lambda r: wire.Measurements(
        block_count=r.randrange(256),
        blocks=tuple(_block(r) for _ in range(r.randint(0, 3))),
        nonce=_nonce(r),
        signature=_rb(r, 0, 96) if r.random() < 0.5 else None),
    lambda r: wire.KeyExchange(requester_random=_nonce(r),
                               dhe_public=_rb(r, 0, 97),
                               slot=r.randrange(8),
                               session_half=r.randrange(1 << 16)),
    lambda r: wire.KeyExchangeRsp(
        responder_random=_nonce(r), dhe_public=_rb(r, 0, 97),
        measurement_summary_digest=_rb(r, 0, 48),
        mutual_auth_requested=r.random() < 0.5, signature=_rb(r, 0, 96),
        verify_data=_rb(r, 0, 48), session_half=r.randrange(1 << 16)),
    lambda r: wire.Finish(
        requester_signature=_rb(r, 0, 384) if r.random() < 0.5 else None,
        verify_data=_rb(r, 0, 48)),
    lambda r: wire.FinishRsp(verify_data=_rb(r, 0, 48)),
    lambda r: wire.PskExchange(psk_hint=_rb(r, 0, 32),
                               requester_context=_rb(r, 0, 32),
                               session_half=r.randrange(1 << 16)),
    lambda r: wire.PskExchangeRsp(responder_context=_rb(r, 0, 32),
                                  verify_data=_rb(r, 0, 48),
                                  session_half=r.randrange(1 << 16)),
    lambda r: wire.PskFinish(verify_data=_rb(r, 0, 48)),
    lambda r: wire.PskFinishRsp(),
    lambda r: wire.Heartbeat(),
    lambda r: wire.HeartbeatAck(),
    lambda r: wire.KeyUpdate(op=r.choice(list(wire.KeyUpdateOp))),
    lambda r: wire.KeyUpdateAck(),
    lambda r: wire.EndSession(),
    lambda r: wire.EndSessionAck(),
    lambda r: wire.GetEncapsulatedRequest(),
    lambda r: wire.EncapsulatedRequest(inner=_rb(r, 0, 128)),
    lambda r: wire.DeliverEncapsulatedResponse(inner=_rb(r, 0, 128)),
    lambda r: wire.EncapsulatedResponseAck(
        inner=_rb(r, 0, 128) if r.random() < 0.5 else None),
    lambda r: wire.ErrorMessage(code=r.choice(list(wire.ErrorCode)),
                                detail=_rb(r, 0, 32)),
    lambda r: wire.AppData(payload=_rb(r, 0, 256)),
]

assert len(_VARIANTS) == len(wire.MESSAGE_TYPES)


def gen_message(rng: random.Random):
    return rng.choice(_VARIANTS)(rng)


def gen_messages(seed: int, count: int):
    rng = random.Random(seed)
    return [gen_message(rng) for _ in range(count)]
