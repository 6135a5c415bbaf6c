"""Small shared helpers: stable 64-bit digests and seeded RNG derivation."""
from __future__ import annotations

import hashlib

MASK64 = (1 << 64) - 1


def digest64(data: bytes) -> int:
    """Stable 64-bit digest of raw bytes (identical across processes and runs)."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def combine64(*parts: int | str | bytes) -> int:
    """Digest a heterogeneous tuple. Ints are varint-ish encoded, strings utf-8."""
    buf = bytearray()
    for p in parts:
        if isinstance(p, int):
            buf.append(0x01)
            buf += p.to_bytes(16, "little", signed=True)
        elif isinstance(p, str):
            b = p.encode("utf-8")
            buf.append(0x02)
            buf += len(b).to_bytes(4, "little")
            buf += b
        else:
            buf.append(0x03)
            buf += len(p).to_bytes(4, "little")
            buf += p
    return digest64(bytes(buf))


def derive_seed(*parts: int | str | bytes) -> int:
    """Derive an independent RNG seed from a base seed plus context tags."""
    return combine64(b"seed", *parts)


def mix64(*parts: int) -> int:
    """Fast non-cryptographic 64-bit mix of integers; stable across processes.

    Used for feature hashing where millions of calls matter; collision
    resistance requirements there are statistical, not adversarial.
    """
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc = ((acc ^ (p & MASK64)) * 0xBF58476D1CE4E5B9) & MASK64
        acc ^= acc >> 29
        acc = (acc * 0x94D049BB133111EB) & MASK64
        acc ^= acc >> 32
    return acc
