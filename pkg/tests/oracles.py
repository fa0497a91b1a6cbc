"""Independent reference implementations used as test oracles.

These deliberately avoid the code paths they check: GCM is rebuilt from
the raw AES block cipher (CTR + GHASH in pure Python), HKDF comes from
cryptography's KDF classes (the package implements RFC 5869 itself),
and the Student-t quantile is inverted numerically with mpmath (the
package uses scipy).
"""

from __future__ import annotations

import math

import mpmath
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

_GCM_R = 0xE1000000000000000000000000000000


def _aes_block(key: bytes, block: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def _gf_mult(x: int, y: int) -> int:
    z = 0
    v = y
    for i in range(127, -1, -1):
        if (x >> i) & 1:
            z ^= v
        if v & 1:
            v = (v >> 1) ^ _GCM_R
        else:
            v >>= 1
    return z


def _ghash(h: int, data: bytes) -> int:
    y = 0
    for off in range(0, len(data), 16):
        block = data[off:off + 16].ljust(16, b"\x00")
        y = _gf_mult(y ^ int.from_bytes(block, "big"), h)
    return y


def gcm_seal_oracle(key: bytes, iv: bytes, aad: bytes, plaintext: bytes) -> bytes:
    """AES-GCM from first principles (NIST SP 800-38D, 96-bit IV)."""
    assert len(iv) == 12
    h = int.from_bytes(_aes_block(key, b"\x00" * 16), "big")
    ct = bytearray()
    for i in range(0, len(plaintext), 16):
        counter = iv + (2 + i // 16).to_bytes(4, "big")
        keystream = _aes_block(key, counter)
        chunk = plaintext[i:i + 16]
        ct += bytes(a ^ b for a, b in zip(chunk, keystream))
    pad = lambda b: b + b"\x00" * ((16 - len(b) % 16) % 16)
    lengths = (len(aad) * 8).to_bytes(8, "big") + (len(ct) * 8).to_bytes(8, "big")
    s = _ghash(h, pad(aad) + pad(bytes(ct)) + lengths)
    j0 = iv + b"\x00\x00\x00\x01"
    tag = bytes(a ^ b for a, b in zip(_aes_block(key, j0),
                                      s.to_bytes(16, "big")))
    return bytes(ct) + tag


def hkdf_oracle(hash_name: str, salt: bytes, ikm: bytes, info: bytes,
                length: int) -> bytes:
    algo = {"sha256": hashes.SHA256, "sha384": hashes.SHA384}[hash_name]()
    return HKDF(algorithm=algo, length=length, salt=salt, info=info).derive(ikm)


_T_CACHE: dict[int, float] = {}


def t_quantile_975_oracle(df: int) -> float:
    """Invert the Student-t CDF at 0.975 by numerical integration."""
    if df in _T_CACHE:
        return _T_CACHE[df]
    mpmath.mp.dps = 30
    nu = mpmath.mpf(df)
    norm = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi)
                                         * mpmath.gamma(nu / 2))

    def pdf(t):
        return norm * (1 + t * t / nu) ** (-(nu + 1) / 2)

    def cdf_minus(x):
        return mpmath.mpf("0.5") + mpmath.quad(pdf, [0, x]) - mpmath.mpf("0.975")

    value = float(mpmath.findroot(cdf_minus, mpmath.mpf(2), tol=1e-24))
    _T_CACHE[df] = value
    return value


def summarize_oracle(values) -> tuple[int, float, float, float]:
    """Brute-force mean / sample sd / 95% CI half-width."""
    n = len(values)
    total = 0.0
    for v in values:
        total += v
    mean = total / n
    acc = 0.0
    for v in values:
        acc += (v - mean) ** 2
    sd = math.sqrt(acc / (n - 1))
    ci95 = t_quantile_975_oracle(n - 1) * sd / math.sqrt(n)
    return n, mean, sd, ci95
