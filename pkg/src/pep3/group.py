"""Scalars and elements of the ristretto255 group.

Group operations are delegated to libsodium (through ``rbcl``); the elligator
map and its inverse come from the pure-Python :mod:`pep3.ristretto`.
Elements are immutable wrappers around their canonical 32-byte encoding and
scalars wrap an integer in ``[0, L)``.  Both encode little-endian.
"""
from __future__ import annotations

import ctypes
import hashlib
import secrets
import threading
from contextlib import contextmanager
from typing import Iterable, Iterator

import rbcl

from pep3 import ristretto

L = ristretto.L
P = int(ristretto.P)

_valid = rbcl.crypto_core_ristretto255_is_valid_point

try:
    # rbcl re-validates every input point; ours are validated once on
    # construction, so call the bundled libsodium directly when we can.
    from rbcl._sodium import _sodium as _lib

    def _binary(fn):
        def call(a: bytes, b: bytes) -> bytes:
            out = ctypes.create_string_buffer(32)
            fn(out, a, b)  # on an identity result libsodium leaves ``out`` zeroed
            return out.raw
        return call

    def _base(s: bytes) -> bytes:
        out = ctypes.create_string_buffer(32)
        _lib.crypto_scalarmult_ristretto255_base(out, s)
        return out.raw

    _mul = _binary(_lib.crypto_scalarmult_ristretto255)
    _add = _binary(_lib.crypto_core_ristretto255_add)
    _sub = _binary(_lib.crypto_core_ristretto255_sub)
except (ImportError, AttributeError):  # pragma: no cover
    _mul = rbcl.crypto_scalarmult_ristretto255_allow_scalar_zero
    _base = rbcl.crypto_scalarmult_ristretto255_base_allow_scalar_zero
    _add = rbcl.crypto_core_ristretto255_add
    _sub = rbcl.crypto_core_ristretto255_sub


class GroupError(ValueError):
    pass


class ZeroInversionError(ArithmeticError):
    pass


class MulCounter(threading.local):
    """Per-thread running totals of scalar multiplications."""

    def __init__(self) -> None:
        self.general = 0
        self.base = 0


counter = MulCounter()


class MulTally:
    general = 0
    base = 0

    def __repr__(self) -> str:
        return f"MulTally(general={self.general}, base={self.base})"


@contextmanager
def count_muls() -> Iterator[MulTally]:
    """Count the scalar multiplications this thread performs inside the block."""
    tally = MulTally()
    g0, b0 = counter.general, counter.base
    try:
        yield tally
    finally:
        tally.general = counter.general - g0
        tally.base = counter.base - b0


class Scalar:
    """An element of Z/LZ."""

    __slots__ = ("value",)

    def __init__(self, value: int) -> None:
        self.value = value % L

    @classmethod
    def random(cls, nonzero: bool = False) -> Scalar:
        while True:
            v = secrets.randbelow(L)
            if v or not nonzero:
                return cls(v)

    @classmethod
    def from_bytes(cls, data: bytes) -> Scalar:
        if len(data) != 32:
            raise GroupError("scalar encoding must be 32 bytes")
        v = int.from_bytes(data, "little")
        if v >= L:
            raise GroupError("non-canonical scalar encoding")
        return cls(v)

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(32, "little")

    def __bytes__(self) -> bytes:
        return self.to_bytes()

    def __add__(self, other: Scalar) -> Scalar:
        return Scalar(self.value + other.value)

    def __sub__(self, other: Scalar) -> Scalar:
        return Scalar(self.value - other.value)

    def __mul__(self, other):
        if isinstance(other, Scalar):
            return Scalar(self.value * other.value)
        if isinstance(other, GroupElement):
            return other.__rmul__(self)
        return NotImplemented

    def __neg__(self) -> Scalar:
        return Scalar(-self.value)

    def __pow__(self, exponent: int) -> Scalar:
        return Scalar(pow(self.value, exponent, L))

    def invert(self) -> Scalar:
        if self.value == 0:
            raise ZeroInversionError("zero scalar has no inverse")
        return Scalar(pow(self.value, -1, L))

    def __bool__(self) -> bool:
        return self.value != 0

    def __eq__(self, other) -> bool:
        if isinstance(other, Scalar):
            return self.value == other.value
        if isinstance(other, int):
            return self.value == other % L
        return NotImplemented

    def __hash__(self) -> int:
        return hash(("Scalar", self.value))

    def __int__(self) -> int:
        return self.value

    def __repr__(self) -> str:
        return f"Scalar({self.value:#x})"


def scalar_arith(a: Scalar, b: Scalar | None, op: str) -> Scalar:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "invert":
        return a.invert()
    if op == "negate":
        return -a
    raise ValueError(f"unknown scalar operation {op!r}")


class GroupElement:
    """A ristretto255 element, held as its canonical encoding."""

    __slots__ = ("_enc",)

    def __init__(self, encoding: bytes, *, check: bool = True) -> None:
        # libsodium masks the top bit before its canonicity check
        if check and (len(encoding) != 32 or encoding[31] & 0x80 or not _valid(encoding)):
            raise GroupError("invalid ristretto255 encoding")
        self._enc = bytes(encoding)

    @classmethod
    def from_bytes(cls, data: bytes) -> GroupElement:
        return cls(data)

    @classmethod
    def _trusted(cls, encoding: bytes) -> GroupElement:
        obj = object.__new__(cls)
        obj._enc = encoding
        return obj

    @classmethod
    def random(cls) -> GroupElement:
        return cls._trusted(rbcl.crypto_core_ristretto255_random())

    @classmethod
    def base_mul(cls, s: Scalar) -> GroupElement:
        counter.base += 1
        return cls._trusted(_base(s.value.to_bytes(32, "little")))

    def to_bytes(self) -> bytes:
        return self._enc

    def __bytes__(self) -> bytes:
        return self._enc

    def __add__(self, other: GroupElement) -> GroupElement:
        return GroupElement._trusted(_add(self._enc, other._enc))

    def __sub__(self, other: GroupElement) -> GroupElement:
        return GroupElement._trusted(_sub(self._enc, other._enc))

    def __neg__(self) -> GroupElement:
        return GroupElement._trusted(_sub(IDENTITY._enc, self._enc))

    def __rmul__(self, s) -> GroupElement:
        if isinstance(s, int):
            s = Scalar(s)
        if not isinstance(s, Scalar):
            return NotImplemented
        counter.general += 1
        return GroupElement._trusted(_mul(s.value.to_bytes(32, "little"), self._enc))

    def is_identity(self) -> bool:
        return self._enc == IDENTITY._enc

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupElement):
            return NotImplemented
        return self._enc == other._enc

    def __hash__(self) -> int:
        return hash(self._enc)

    def __repr__(self) -> str:
        return f"GroupElement({self._enc.hex()})"


IDENTITY = GroupElement(bytes(32))
B = GroupElement(ristretto.encode(ristretto.BASE))


def element_arith(X: GroupElement, Y: GroupElement | None, s: Scalar | None, op: str) -> GroupElement:
    if op == "add":
        return X + Y
    if op == "sub":
        return X - Y
    if op == "scalar_mul":
        return s * X
    if op == "base_mul":
        return GroupElement.base_mul(s)
    raise ValueError(f"unknown element operation {op!r}")


def hash_to_scalar(domain_tag: bytes, inputs: Iterable[GroupElement], extra: bytes = b"") -> Scalar:
    """SHA-512 of the length-prefixed tag, the encodings and ``extra``, mod L."""
    h = hashlib.sha512()
    h.update(len(domain_tag).to_bytes(1, "big"))
    h.update(domain_tag)
    n = 0
    for X in inputs:
        h.update(X._enc)
        n += 1
    if n == 0:
        raise ValueError("hash_to_scalar needs at least one element")
    h.update(extra)
    return Scalar(int.from_bytes(h.digest(), "little"))


def ell2(x: int) -> GroupElement:
    """Elligator 2 map from the field of ``P`` elements onto the group."""
    if not 0 <= x < P:
        raise ValueError("field element out of range")
    return GroupElement._trusted(ristretto.encode(ristretto.elligator(x)))


def ell2_inverse(A: GroupElement) -> set[int]:
    """All field elements ``x`` with ``ell2(x) == A`` (at most 16)."""
    return ristretto.elligator_inverse(ristretto.decode(A.to_bytes()))
