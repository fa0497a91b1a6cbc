"""Cryptographic provider: the fixed default suite plus negotiation menus.

The protocol layers only ever touch this module's surface; algorithm
internals come from the `cryptography` package. HKDF is implemented here
directly (RFC 5869 over the negotiated hash) so the documented key
schedule is self-contained and independently checkable.
"""

from __future__ import annotations

import datetime
import hashlib
import hmac as _hmac
import random
import secrets
from dataclasses import dataclass
from functools import lru_cache

from cryptography import x509
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.x509.oid import NameOID

from .errors import (
    BrokenLink,
    DecryptError,
    InvalidPoint,
    KeyAlgorithmMismatch,
    LengthExceeded,
    MalformedMessage,
    UntrustedRoot,
)

# Algorithm id registries (one byte each on the wire).

SIG_RSA_PSS_3072 = 0x01
SIG_ECDSA_P384 = 0x02

HASH_SHA384 = 0x01
HASH_SHA256 = 0x02

DHE_SECP384R1 = 0x01
DHE_SECP256R1 = 0x02

AEAD_AES_256_GCM = 0x01

KDF_HKDF = 0x01

_HASHLIB = {HASH_SHA384: hashlib.sha384, HASH_SHA256: hashlib.sha256}
_HASH_LEN = {HASH_SHA384: 48, HASH_SHA256: 32}
_HASH_PRIMITIVE = {HASH_SHA384: hashes.SHA384, HASH_SHA256: hashes.SHA256}
_CURVE = {DHE_SECP384R1: ec.SECP384R1, DHE_SECP256R1: ec.SECP256R1}

AEAD_KEY_LEN = 32
AEAD_NONCE_LEN = 12
AEAD_TAG_LEN = 16


@lru_cache(maxsize=64)
def _aesgcm(key: bytes) -> AESGCM:
    # one key schedule per session key instead of per record
    return AESGCM(key)


@dataclass(frozen=True)
class CryptoSuite:
    """One negotiated algorithm per category."""

    requester_sig: int = SIG_RSA_PSS_3072
    responder_sig: int = SIG_ECDSA_P384
    hash: int = HASH_SHA384
    dhe_group: int = DHE_SECP384R1
    aead: int = AEAD_AES_256_GCM
    key_schedule: int = KDF_HKDF

    @property
    def hash_len(self) -> int:
        return _HASH_LEN[self.hash]

    def as_tuple(self) -> tuple[int, int, int, int, int, int]:
        return (self.requester_sig, self.responder_sig, self.hash,
                self.dhe_group, self.aead, self.key_schedule)


@dataclass(frozen=True)
class AlgorithmMenu:
    """Offered algorithm ids per category, in descending priority."""

    requester_sigs: tuple[int, ...] = (SIG_RSA_PSS_3072,)
    responder_sigs: tuple[int, ...] = (SIG_ECDSA_P384,)
    hashes: tuple[int, ...] = (HASH_SHA384, HASH_SHA256)
    dhe_groups: tuple[int, ...] = (DHE_SECP384R1, DHE_SECP256R1)
    aeads: tuple[int, ...] = (AEAD_AES_256_GCM,)
    key_schedules: tuple[int, ...] = (KDF_HKDF,)

    def categories(self) -> tuple[tuple[int, ...], ...]:
        return (self.requester_sigs, self.responder_sigs, self.hashes,
                self.dhe_groups, self.aeads, self.key_schedules)


DEFAULT_SUITE = CryptoSuite()
DEFAULT_MENU = AlgorithmMenu()


class CryptoProvider:
    """Default provider for the negotiated suite.

    Stateless after construction apart from the optional seeded RNG,
    which makes nonces and ephemeral keys reproducible in tests.
    """

    def __init__(self, suite: CryptoSuite = DEFAULT_SUITE, seed: int | None = None,
                 rng: random.Random | None = None):
        self.suite = suite
        self._rng = rng if rng is not None else (
            random.Random(seed) if seed is not None else None)

    def with_suite(self, suite: CryptoSuite) -> "CryptoProvider":
        """Same RNG stream, different negotiated suite."""
        return CryptoProvider(suite, rng=self._rng)

    # -- randomness ----------------------------------------------------------

    def random_bytes(self, n: int) -> bytes:
        if self._rng is not None:
            return self._rng.randbytes(n)
        return secrets.token_bytes(n)

    # -- hashing -------------------------------------------------------------

    def hash(self, data: bytes) -> bytes:
        return _HASHLIB[self.suite.hash](data).digest()

    def hmac(self, key: bytes, data: bytes) -> bytes:
        if not key:
            raise ValueError("hmac key must be non-empty")
        return _hmac.new(key, data, _HASHLIB[self.suite.hash]).digest()

    # -- signatures ----------------------------------------------------------

    def sign(self, private_key, data: bytes, algo: int) -> bytes:
        halg = _HASH_PRIMITIVE[self.suite.hash]()
        if algo == SIG_RSA_PSS_3072:
            if not isinstance(private_key, rsa.RSAPrivateKey):
                raise KeyAlgorithmMismatch("RSA-PSS needs an RSA key")
            return private_key.sign(
                data,
                padding.PSS(mgf=padding.MGF1(halg),
                            salt_length=halg.digest_size),
                halg)
        if algo == SIG_ECDSA_P384:
            if not isinstance(private_key, ec.EllipticCurvePrivateKey):
                raise KeyAlgorithmMismatch("ECDSA needs an EC key")
            return private_key.sign(data, ec.ECDSA(halg))
        raise KeyAlgorithmMismatch(f"unknown signature algorithm {algo:#x}")

    def verify(self, public_key, data: bytes, sig: bytes, algo: int) -> bool:
        halg = _HASH_PRIMITIVE[self.suite.hash]()
        try:
            if algo == SIG_RSA_PSS_3072:
                if not isinstance(public_key, rsa.RSAPublicKey):
                    raise KeyAlgorithmMismatch("RSA-PSS needs an RSA key")
                public_key.verify(
                    sig, data,
                    padding.PSS(mgf=padding.MGF1(halg),
                                salt_length=halg.digest_size),
                    halg)
            elif algo == SIG_ECDSA_P384:
                if not isinstance(public_key, ec.EllipticCurvePublicKey):
                    raise KeyAlgorithmMismatch("ECDSA needs an EC key")
                public_key.verify(sig, data, ec.ECDSA(halg))
            else:
                raise KeyAlgorithmMismatch(f"unknown signature algorithm {algo:#x}")
        except InvalidSignature:
            return False
        return True

    # -- ephemeral Diffie-Hellman ---------------------------------------------

    def generate_dhe_keypair(self, group: int | None = None):
        """Returns (private key object, uncompressed-point public bytes)."""
        curve = _CURVE[group if group is not None else self.suite.dhe_group]()
        priv = ec.generate_private_key(curve)
        pub = priv.public_key().public_bytes(
            serialization.Encoding.X962,
            serialization.PublicFormat.UncompressedPoint)
        return priv, pub

    def dhe_shared_secret(self, private_key, peer_public: bytes) -> bytes:
        curve = private_key.curve
        try:
            peer = ec.EllipticCurvePublicKey.from_encoded_point(curve, peer_public)
        except ValueError as exc:
            raise InvalidPoint(str(exc)) from None
        # exchange() yields the x coordinate, big-endian, padded to the
        # curve size -- exactly the documented SharedSecret definition.
        return private_key.exchange(ec.ECDH(), peer)

    # -- AEAD ----------------------------------------------------------------

    def aead_seal(self, key: bytes, nonce: bytes, aad: bytes, plaintext: bytes) -> bytes:
        if len(key) != AEAD_KEY_LEN:
            raise ValueError(f"AEAD key must be {AEAD_KEY_LEN} bytes")
        if len(nonce) != AEAD_NONCE_LEN:
            raise ValueError(f"AEAD nonce must be {AEAD_NONCE_LEN} bytes")
        return _aesgcm(key).encrypt(nonce, plaintext, aad)

    def aead_open(self, key: bytes, nonce: bytes, aad: bytes, ciphertext: bytes) -> bytes:
        if len(key) != AEAD_KEY_LEN:
            raise ValueError(f"AEAD key must be {AEAD_KEY_LEN} bytes")
        if len(nonce) != AEAD_NONCE_LEN:
            raise ValueError(f"AEAD nonce must be {AEAD_NONCE_LEN} bytes")
        try:
            return _aesgcm(key).decrypt(nonce, ciphertext, aad)
        except InvalidTag:
            raise DecryptError("AEAD tag mismatch") from None

    # -- HKDF (RFC 5869) -----------------------------------------------------

    def hkdf_extract(self, salt: bytes, ikm: bytes) -> bytes:
        if not salt:
            salt = b"\x00" * self.suite.hash_len
        return self.hmac(salt, ikm)

    def hkdf_expand(self, prk: bytes, info: bytes, length: int) -> bytes:
        hlen = self.suite.hash_len
        if length > 255 * hlen:
            raise LengthExceeded(f"cannot expand to {length} bytes")
        out = bytearray()
        block = b""
        counter = 1
        while len(out) < length:
            block = self.hmac(prk, block + info + bytes([counter]))
            out += block
            counter += 1
        return bytes(out[:length])


# -- certificate chains -------------------------------------------------------


@dataclass(frozen=True)
class CertificateChain:
    """Ordered root-to-leaf chain, each certificate in DER form."""

    slot: int
    certificates: tuple[bytes, ...]

    def serialize(self) -> bytes:
        return b"".join(self.certificates)

    @classmethod
    def from_serialized(cls, slot: int, blob: bytes) -> "CertificateChain":
        return cls(slot=slot, certificates=tuple(split_der_certificates(blob)))

    def leaf(self) -> x509.Certificate:
        return x509.load_der_x509_certificate(self.certificates[-1])

    def root(self) -> bytes:
        return self.certificates[0]


def split_der_certificates(blob: bytes) -> list[bytes]:
    """Split a concatenation of DER certificates on TLV boundaries."""
    out = []
    off = 0
    n = len(blob)
    while off < n:
        if n - off < 2 or blob[off] != 0x30:
            raise MalformedMessage("not a DER SEQUENCE")
        first = blob[off + 1]
        if first < 0x80:
            total = 2 + first
        else:
            nlen = first & 0x7F
            if nlen == 0 or n - off < 2 + nlen:
                raise MalformedMessage("bad DER length")
            total = 2 + nlen + int.from_bytes(blob[off + 2:off + 2 + nlen], "big")
        if off + total > n:
            raise MalformedMessage("truncated DER certificate")
        out.append(blob[off:off + total])
        off += total
    if not out:
        raise MalformedMessage("empty certificate blob")
    return out


def chain_digest(provider: CryptoProvider, chain: CertificateChain) -> bytes:
    return provider.hash(chain.serialize())


def verify_certificate_chain(chain: CertificateChain, trusted_root: bytes):
    """Returns the leaf public key iff every link verifies and the root
    is byte-identical to `trusted_root`."""
    if not chain.certificates:
        raise BrokenLink("empty chain")
    if chain.certificates[0] != trusted_root:
        raise UntrustedRoot("chain root is not the trusted root")
    certs = [x509.load_der_x509_certificate(der) for der in chain.certificates]
    issuer = certs[0]
    for cert in certs:
        try:
            cert.verify_directly_issued_by(issuer)
        except (InvalidSignature, ValueError, TypeError) as exc:
            raise BrokenLink(str(exc)) from None
        issuer = cert
    return certs[-1].public_key()


def _make_cert(subject: str, issuer: str, public_key, signer_key, is_ca: bool):
    now = datetime.datetime(2026, 1, 1, tzinfo=datetime.timezone.utc)
    builder = (
        x509.CertificateBuilder()
        .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, subject)]))
        .issuer_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, issuer)]))
        .public_key(public_key)
        .serial_number(x509.random_serial_number())
        .not_valid_before(now)
        .not_valid_after(now + datetime.timedelta(days=3650))
        .add_extension(x509.BasicConstraints(ca=is_ca, path_length=None), critical=True)
    )
    return builder.sign(signer_key, hashes.SHA384())


def generate_test_chain(role: str, depth: int = 3, slot: int = 0):
    """Builds a root->leaf fixture chain for `role` ("requester"|"responder").

    The leaf key algorithm follows the role's default signature algorithm
    (RSA-3072 for requesters, P-384 for responders); CA links are P-384.
    Returns (CertificateChain, leaf private key).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if role not in ("requester", "responder"):
        raise ValueError("role must be 'requester' or 'responder'")

    def leaf_keygen():
        if role == "requester":
            return rsa.generate_private_key(public_exponent=65537, key_size=3072)
        return ec.generate_private_key(ec.SECP384R1())

    ders = []
    if depth == 1:
        key = leaf_keygen()
        cert = _make_cert(f"{role} leaf", f"{role} leaf", key.public_key(), key, True)
        ders.append(cert.public_bytes(serialization.Encoding.DER))
        return CertificateChain(slot=slot, certificates=tuple(ders)), key

    signer = ec.generate_private_key(ec.SECP384R1())
    cert = _make_cert(f"{role} root", f"{role} root", signer.public_key(), signer, True)
    ders.append(cert.public_bytes(serialization.Encoding.DER))
    prev_name = f"{role} root"
    for i in range(depth - 2):
        key = ec.generate_private_key(ec.SECP384R1())
        name = f"{role} ca{i}"
        cert = _make_cert(name, prev_name, key.public_key(), signer, True)
        ders.append(cert.public_bytes(serialization.Encoding.DER))
        signer, prev_name = key, name
    leaf_key = leaf_keygen()
    cert = _make_cert(f"{role} leaf", prev_name, leaf_key.public_key(), signer, False)
    ders.append(cert.public_bytes(serialization.Encoding.DER))
    return CertificateChain(slot=slot, certificates=tuple(ders)), leaf_key


# -- PEM fixture files ---------------------------------------------------------


def save_chain_pem(chain: CertificateChain, key, chain_path, key_path) -> None:
    pem = b"".join(
        x509.load_der_x509_certificate(der).public_bytes(serialization.Encoding.PEM)
        for der in chain.certificates)
    with open(chain_path, "wb") as fh:
        fh.write(pem)
    with open(key_path, "wb") as fh:
        fh.write(key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption()))


def load_chain_pem(chain_path, key_path=None, slot: int = 0):
    """Loads a PEM chain (root first) and optionally its leaf key."""
    with open(chain_path, "rb") as fh:
        pem = fh.read()
    certs = x509.load_pem_x509_certificates(pem)
    chain = CertificateChain(
        slot=slot,
        certificates=tuple(c.public_bytes(serialization.Encoding.DER) for c in certs))
    if key_path is None:
        return chain, None
    with open(key_path, "rb") as fh:
        key = serialization.load_pem_private_key(fh.read(), password=None)
    return chain, key
