"""Reversible encoding of 128-bit strings (IP addresses) as group elements.

Bit layout: bit ``b_{8j+k+1}`` is bit ``k`` (least significant first) of byte
``j``.  A 253-bit string ``b_1..b_253`` is read as the little-endian integer
``v`` and mapped through ``ell2(2*v)``; lizard fills bits 129..253 with the
first 125 bits of SHA-256 of the 16 input bytes, in the same order.
See ``docs/encoding.md`` for the pinned vectors.
"""
from __future__ import annotations

import hashlib
import ipaddress

from pep3 import ristretto
from pep3.group import GroupElement, ell2, ell2_inverse

_MASK125 = (1 << 125) - 1
_MASK128 = (1 << 128) - 1
_LIMIT = 1 << 254


class NotAnAddress(ValueError):
    """The element is not the lizard image of any 128-bit string."""


class AmbiguousDecode(ValueError):
    """More than one hash-consistent preimage (expected never to happen)."""


def ell2_prime(bits: int) -> GroupElement:
    """``ell2(b_1 2 + ... + b_253 2^253)`` for ``bits = sum b_i 2^(i-1)``."""
    if not 0 <= bits < 1 << 253:
        raise ValueError("expected a 253-bit string")
    return ell2(bits << 1)


def ell2_prime_inverse(A: GroupElement) -> set[int]:
    return {x >> 1 for x in ell2_inverse(A) if x & 1 == 0 and x < _LIMIT}


def _check_bits(w: bytes) -> int:
    return int.from_bytes(hashlib.sha256(w).digest(), "little") & _MASK125


def lizard_bits(w: bytes) -> int:
    if len(w) != 16:
        raise ValueError("lizard encodes exactly 16 bytes")
    return int.from_bytes(w, "little") | (_check_bits(w) << 128)


def lizard_encode(w: bytes) -> GroupElement:
    return ell2_prime(lizard_bits(w))


def lizard_decode(A: GroupElement) -> bytes:
    """Recover the 16 bytes encoded by ``A`` or raise :class:`NotAnAddress`."""
    point = ristretto.decode(A.to_bytes())
    found = set()
    # cheap hash filter before the (costlier) forward-map confirmation
    for t in set(ristretto.elligator_candidates(point)):
        if t & 1 or t >= _LIMIT:
            continue
        v = t >> 1
        w = (v & _MASK128).to_bytes(16, "little")
        if v >> 128 != _check_bits(w):
            continue
        if ristretto.equal(ristretto.elligator(t), point):
            found.add(w)
    if not found:
        raise NotAnAddress("element is not a lizard encoding")
    if len(found) > 1:
        raise AmbiguousDecode(f"{len(found)} hash-consistent preimages")
    return found.pop()


def ip_to_address128(text: str) -> bytes:
    """IPv6 as-is; IPv4 as the mapped address ``::ffff:a.b.c.d``."""
    addr = ipaddress.ip_address(text.strip())
    if addr.version == 4:
        addr = ipaddress.IPv6Address(b"\x00" * 10 + b"\xff\xff" + addr.packed)
    return addr.packed


def address128_to_ip(a: bytes) -> str:
    if len(a) != 16:
        raise ValueError("expected 16 bytes")
    addr = ipaddress.IPv6Address(a)
    if addr.ipv4_mapped is not None:
        return str(addr.ipv4_mapped)
    return str(addr)


def encode_ip(text: str) -> GroupElement:
    return lizard_encode(ip_to_address128(text))


def decode_ip(A: GroupElement) -> str:
    return address128_to_ip(lizard_decode(A))
