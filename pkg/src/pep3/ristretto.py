"""Pure-Python ristretto255 over edwards25519, including the elligator map.

This is the slow reference path.  It is used directly for the elligator
map and its inverse (which libsodium does not expose) and serves as the
independent oracle the fast :mod:`pep3.group` backend is tested against.

Conventions follow RFC 9496: field elements are encoded as 32 little-endian
bytes, an element is *negative* when its canonical representative is odd,
and ``sqrt_ratio_m1`` returns the non-negative root.  Points are kept in
extended coordinates ``(X, Y, Z, T)`` with ``x = X/Z``, ``y = Y/Z`` and
``XY = ZT`` on the curve ``-x^2 + y^2 = 1 + d x^2 y^2``.
"""
from __future__ import annotations

from typing import Iterator, NamedTuple

import gmpy2
from gmpy2 import mpz

P = mpz(2**255 - 19)
L = 2**252 + 27742317777372353535851937790883648493

D = mpz(37095705934669439343138083508754565189542113879843219016388785533085940283555)
SQRT_M1 = mpz(19681161376707505956807079304988542015446066515923890162744021073123829784752)
SQRT_AD_MINUS_ONE = mpz(25063068953384623474111414158702152701244531502492656460079210482610430750235)
INVSQRT_A_MINUS_D = mpz(54469307008909316920995813868745141605393597292927456921205312896311721017578)
ONE_MINUS_D_SQ = mpz(1159843021668779879193775521855586647937357759715417654439879720876111806838)
D_MINUS_ONE_SQ = mpz(40440834346308536858101042469323190826248399146238708352240133220865137265952)

_D2 = (2 * D) % P
_EXP_P58 = (P - 5) // 8


class DecodeError(ValueError):
    """A 32-byte string is not the canonical encoding of a group element."""


class Point(NamedTuple):
    X: mpz
    Y: mpz
    Z: mpz
    T: mpz


def is_negative(x) -> bool:
    return bool(x % P & 1)


def fe_abs(x):
    x %= P
    return P - x if x & 1 else x


def fe_inv(x):
    return gmpy2.invert(x % P, P)


def sqrt_ratio_m1(u, v) -> tuple[bool, mpz]:
    """Return ``(was_square, r)`` with ``r`` non-negative.

    ``r = sqrt(u/v)`` when ``u/v`` is square, ``r = sqrt(i*u/v)`` otherwise;
    ``(False, 0)`` when ``v = 0`` and ``u != 0``.
    """
    u %= P
    v %= P
    v3 = v * v % P * v % P
    v7 = v3 * v3 % P * v % P
    r = u * v3 % P * gmpy2.powmod(u * v7 % P, _EXP_P58, P) % P
    check = v * r % P * r % P
    correct = check == u
    flipped = check == (-u) % P
    flipped_i = check == (-u * SQRT_M1) % P
    if flipped or flipped_i:
        r = r * SQRT_M1 % P
    return correct or flipped, fe_abs(r)


IDENTITY = Point(mpz(0), mpz(1), mpz(1), mpz(0))


def add(p1: Point, p2: Point) -> Point:
    X1, Y1, Z1, T1 = p1
    X2, Y2, Z2, T2 = p2
    a = (Y1 - X1) * (Y2 - X2) % P
    b = (Y1 + X1) * (Y2 + X2) % P
    c = T1 * _D2 % P * T2 % P
    dd = 2 * Z1 * Z2 % P
    e, f, g, h = b - a, dd - c, dd + c, b + a
    return Point(e * f % P, g * h % P, f * g % P, e * h % P)


def double(p: Point) -> Point:
    X1, Y1, Z1, _ = p
    a = X1 * X1 % P
    b = Y1 * Y1 % P
    c = 2 * Z1 * Z1 % P
    h = a + b
    e = h - (X1 + Y1) * (X1 + Y1)
    g = a - b
    f = c + g
    return Point(e * f % P, g * h % P, f * g % P, e * h % P)


def neg(p: Point) -> Point:
    return Point((-p.X) % P, p.Y, p.Z, (-p.T) % P)


def scalar_mul(k: int, p: Point) -> Point:
    """Double-and-add; ``k`` is taken as a plain non-negative integer."""
    if k < 0:
        raise ValueError("negative multiplier")
    acc = IDENTITY
    while k:
        if k & 1:
            acc = add(acc, p)
        p = double(p)
        k >>= 1
    return acc


def equal(p1: Point, p2: Point) -> bool:
    """Ristretto equality: equal up to the 4-torsion."""
    return (p1.X * p2.Y - p1.Y * p2.X) % P == 0 or (p1.Y * p2.Y - p1.X * p2.X) % P == 0


def decode(data: bytes) -> Point:
    if len(data) != 32:
        raise DecodeError("encoding must be 32 bytes")
    s = mpz(int.from_bytes(data, "little"))
    if s >= P or s & 1:
        raise DecodeError("non-canonical field element")
    ss = s * s % P
    u1 = (1 - ss) % P
    u2 = (1 + ss) % P
    u2_sqr = u2 * u2 % P
    v = (-(D * u1 % P * u1) - u2_sqr) % P
    was_square, invsqrt = sqrt_ratio_m1(1, v * u2_sqr)
    den_x = invsqrt * u2 % P
    den_y = invsqrt * den_x % P * v % P
    x = fe_abs(2 * s * den_x)
    y = u1 * den_y % P
    t = x * y % P
    if not was_square or t & 1 or y == 0:
        raise DecodeError("not a valid ristretto255 encoding")
    return Point(x, y, mpz(1), t)


def encode(p: Point) -> bytes:
    x0, y0, z0, t0 = p
    u1 = (z0 + y0) * (z0 - y0) % P
    u2 = x0 * y0 % P
    _, invsqrt = sqrt_ratio_m1(1, u1 * u2 % P * u2)
    den1 = invsqrt * u1 % P
    den2 = invsqrt * u2 % P
    z_inv = den1 * den2 % P * t0 % P
    if is_negative(t0 * z_inv):
        x, y = y0 * SQRT_M1 % P, x0 * SQRT_M1 % P
        den_inv = den1 * INVSQRT_A_MINUS_D % P
    else:
        x, y = x0, y0
        den_inv = den2
    if is_negative(x * z_inv):
        y = (-y) % P
    s = fe_abs(den_inv * (z0 - y))
    return int(s).to_bytes(32, "little")


BASE = decode(bytes.fromhex("e2f2ae0a6abc4e71a884a961c500515f58e30b6aa582dd8db6a65945e08d2d76"))


def elligator(t) -> Point:
    """The ristretto255 elligator map of a field element ``t``."""
    t = mpz(t) % P
    r = SQRT_M1 * t % P * t % P
    u = (r + 1) * ONE_MINUS_D_SQ % P
    v = (-1 - r * D) * (r + D) % P
    was_square, s = sqrt_ratio_m1(u, v)
    if was_square:
        c = P - 1
    else:
        s = (-fe_abs(s * t)) % P
        c = r
    n = (c * (r - 1) % P * D_MINUS_ONE_SQ - v) % P
    w0 = 2 * s * v % P
    w1 = n * SQRT_AD_MINUS_ONE % P
    w2 = (1 - s * s) % P
    w3 = (1 + s * s) % P
    return Point(w0 * w3 % P, w2 * w1 % P, w1 * w3 % P, w0 * w2 % P)


def _square_roots(value) -> list:
    ok, root = sqrt_ratio_m1(value, 1)
    if not ok:
        return []
    return [root, (-root) % P]


# Inputs whose image has s = 0: t = 0 (r = 0), r = -1 and the two zeros of v.
_SPECIAL_CANDIDATES = sorted({
    int(c)
    for value in (0, SQRT_M1, SQRT_M1 * D % P, SQRT_M1 * fe_inv(D) % P)
    for c in ([mpz(0)] if value == 0 else _square_roots(value))
})


def _representatives(p: Point) -> Iterator[tuple[mpz, mpz]]:
    zinv = fe_inv(p.Z)
    x = p.X * zinv % P
    y = p.Y * zinv % P
    yield x, y
    yield (-x) % P, (-y) % P
    yield SQRT_M1 * y % P, SQRT_M1 * x % P
    yield (-SQRT_M1 * y) % P, (-SQRT_M1 * x) % P


def elligator_candidates(p: Point) -> Iterator[int]:
    """Yield field elements that may map onto ``p``; callers must verify.

    Every true preimage is among the yielded values.  For each of the four
    affine representatives of the ristretto class and each sign of the
    quartic coordinate ``s``, the forward map's ``r`` follows from a single
    Möbius relation, which leaves one square root per branch.
    """
    yield from _SPECIAL_CANDIDATES
    for x, y in _representatives(p):
        if x == 0 or (1 + y) % P == 0 or y == 1:
            continue
        ok, s0 = sqrt_ratio_m1(1 - y, 1 + y)
        if not ok:
            continue
        xc_inv = fe_inv(x * SQRT_AD_MINUS_ONE)
        for s in (s0, (-s0) % P):
            q = 2 * s * xc_inv % P
            b = (q + 1) * (1 + D) % P * fe_inv(s * s % P * (D - 1)) % P
            if s & 1:
                b = (-b) % P
            if b == 1:
                continue
            ok, t = sqrt_ratio_m1(-SQRT_M1 * (1 + b), 1 - b)
            if ok:
                yield int(t)
                if t:
                    yield int(P - t)


def elligator_inverse(p: Point) -> set[int]:
    """All ``t`` in ``[0, p)`` with ``elligator(t)`` equal to ``p``."""
    return {t for t in set(elligator_candidates(p)) if equal(elligator(t), p)}
