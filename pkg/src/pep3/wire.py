"""Length-prefixed binary frames and the payload codec shared by all services.

A frame is ``len:u32be || tag:u8 || payload`` where ``len`` counts the tag and
payload.  Payloads are built from fixed-width fields: 32-byte elements and
scalars, 96-byte cyphertexts, big-endian integers, and ``u32``-length-prefixed
byte strings.  See ``docs/protocol.md`` for the message tags.
"""
from __future__ import annotations

import enum
import socket
import struct
from typing import Callable, Iterable

from pep3.elgamal import CYPHERTEXT_SIZE, Cyphertext
from pep3.group import GroupElement, GroupError, Scalar

MAX_FRAME = 1 << 28


class Tag(enum.IntEnum):
    TRANSCRYPT = 0x01
    PROOF = 0x02
    ENROL = 0x03
    DERIVATION_PROOF = 0x04
    SF_INGEST = 0x10
    SF_QUERY = 0x11
    AUTH = 0x20
    TRANSCRYPT_OK = 0x81
    PROOF_OK = 0x82
    ENROL_OK = 0x83
    DERIVATION_PROOF_OK = 0x84
    SF_INGEST_OK = 0x90
    SF_QUERY_OK = 0x91
    AUTH_CHALLENGE = 0xA0
    AUTH_OK = 0xA1
    ERROR = 0x7F


class ErrorCode(enum.IntEnum):
    MALFORMED = 1
    PERMIT_INVALID = 2
    CHAIN_INVALID = 3
    NOT_MY_TRIPLES = 4
    TICKET_FORGED = 5
    TICKET_MISMATCH = 6
    UNKNOWN_PARTY = 7
    WHITELIST_VIOLATION = 8
    REFUSED = 9
    INTERNAL = 10


class ProtocolError(Exception):
    """An error reported by a remote service (or a malformed message)."""

    def __init__(self, code: ErrorCode, message: str) -> None:
        super().__init__(f"{code.name}: {message}")
        self.code = code
        self.message = message


class WireFormatError(ProtocolError):
    def __init__(self, message: str) -> None:
        super().__init__(ErrorCode.MALFORMED, message)


def frame(tag: int, payload: bytes) -> bytes:
    return struct.pack(">IB", len(payload) + 1, tag) + payload


def unframe(data: bytes) -> tuple[int, bytes]:
    if len(data) < 5:
        raise WireFormatError("short frame")
    (length,) = struct.unpack(">I", data[:4])
    if length != len(data) - 4 or length < 1:
        raise WireFormatError("frame length mismatch")
    return data[4], data[5:]


def error_frame(code: ErrorCode, message: str) -> bytes:
    return frame(Tag.ERROR, bytes([code]) + message.encode())


def expect(data: bytes, tag: int) -> bytes:
    """Unframe a response, raising the remote error if there was one."""
    got, payload = unframe(data)
    if got == Tag.ERROR:
        code = ErrorCode(payload[0]) if payload and payload[0] in ErrorCode._value2member_map_ \
            else ErrorCode.INTERNAL
        raise ProtocolError(code, payload[1:].decode(errors="replace"))
    if got != tag:
        raise WireFormatError(f"expected tag {tag:#x}, got {got:#x}")
    return payload


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> Writer:
        self._parts.append(struct.pack(">B", v))
        return self

    def u16(self, v: int) -> Writer:
        self._parts.append(struct.pack(">H", v))
        return self

    def u32(self, v: int) -> Writer:
        self._parts.append(struct.pack(">I", v))
        return self

    def u64(self, v: int) -> Writer:
        self._parts.append(struct.pack(">Q", v))
        return self

    def raw(self, b: bytes) -> Writer:
        self._parts.append(b)
        return self

    def var(self, b: bytes) -> Writer:
        self._parts.append(struct.pack(">I", len(b)))
        self._parts.append(b)
        return self

    def element(self, x: GroupElement) -> Writer:
        return self.raw(x.to_bytes())

    def scalar(self, s: Scalar) -> Writer:
        return self.raw(s.to_bytes())

    def cyphertext(self, c: Cyphertext) -> Writer:
        return self.raw(c.to_bytes())

    def cyphertexts(self, cs: Iterable[Cyphertext]) -> Writer:
        cs = list(cs)
        self.u32(len(cs))
        self._parts.extend(c.to_bytes() for c in cs)
        return self

    def items(self, xs: Iterable, put: Callable[[Writer, object], object]) -> Writer:
        xs = list(xs)
        self.u32(len(xs))
        for x in xs:
            put(self, x)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._off = 0

    def _take(self, n: int) -> bytes:
        if self._off + n > len(self._data):
            raise WireFormatError("payload truncated")
        b = self._data[self._off:self._off + n]
        self._off += n
        return b

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def var(self) -> bytes:
        return self._take(self.u32())

    def element(self) -> GroupElement:
        try:
            return GroupElement(self._take(32))
        except GroupError as exc:
            raise WireFormatError(str(exc)) from None

    def scalar(self) -> Scalar:
        try:
            return Scalar.from_bytes(self._take(32))
        except GroupError as exc:
            raise WireFormatError(str(exc)) from None

    def cyphertext(self) -> Cyphertext:
        try:
            return Cyphertext.from_bytes(self._take(CYPHERTEXT_SIZE))
        except GroupError as exc:
            raise WireFormatError(f"malformed cyphertext: {exc}") from None

    def cyphertexts(self) -> list[Cyphertext]:
        return [self.cyphertext() for _ in range(self.u32())]

    def items(self, get: Callable[[Reader], object]) -> list:
        return [get(self) for _ in range(self.u32())]

    def done(self) -> None:
        if self._off != len(self._data):
            raise WireFormatError("trailing bytes in payload")


# -- socket helpers ----------------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", head)
    if not 1 <= length <= MAX_FRAME:
        raise WireFormatError("bad frame length")
    return head + _recv_exact(sock, length)


def write_frame(sock: socket.socket, data: bytes) -> None:
    sock.sendall(data)
